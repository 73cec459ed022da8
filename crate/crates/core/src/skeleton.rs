//! Controls and the deterministic skeleton equation
//! `dX/dt = A1(X) + fbar(X) + B1(X) P1 phi`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::averaging::{fbar, FbarBackend};
use crate::error::{Error, Result};
use crate::field::{norm, norm_raw, Field};
use crate::models::Model;
use crate::paths::{SlowStepper, TimeGrid, BLOW_UP_RADIUS};

/// Piecewise-constant control on a `dt` mesh. Row `k` holds the slow block
/// (`slow_dim` entries) followed by the fast block (`fast_dim` entries).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub dt: f64,
    pub slow_dim: usize,
    pub fast_dim: usize,
    values: Vec<f64>,
    pub bound_m: Option<f64>,
}

impl Control {
    pub fn new(dt: f64, slow_dim: usize, fast_dim: usize, values: Vec<f64>, bound_m: Option<f64>) -> Result<Self> {
        let w = slow_dim + fast_dim;
        if !(dt > 0.0) {
            return Err(Error::config("control mesh needs dt > 0"));
        }
        if w == 0 || values.len() % w != 0 {
            return Err(Error::DimensionMismatch {
                expected: w,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("control values must be finite"));
        }
        let c = Self {
            dt,
            slow_dim,
            fast_dim,
            values,
            bound_m: None,
        };
        match bound_m {
            Some(m) => c.with_bound(m),
            None => Ok(c),
        }
    }

    pub fn zeros(n_steps: usize, dt: f64, slow_dim: usize, fast_dim: usize) -> Self {
        Self {
            dt,
            slow_dim,
            fast_dim,
            values: vec![0.0; n_steps * (slow_dim + fast_dim)],
            bound_m: None,
        }
    }

    /// Zero control with the block sizes of `model`.
    pub fn for_model(model: &Model, grid: &TimeGrid) -> Self {
        Self::zeros(
            grid.n_steps(),
            grid.dt,
            model.slow_noise.n_modes(),
            model.fast_noise.n_modes(),
        )
    }

    /// `values[k][j] = f(k, j)`.
    pub fn from_fn(n_steps: usize, dt: f64, slow_dim: usize, fast_dim: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let w = slow_dim + fast_dim;
        let values = (0..n_steps * w).map(|i| f(i / w, i % w)).collect();
        Self {
            dt,
            slow_dim,
            fast_dim,
            values,
            bound_m: None,
        }
    }

    /// Attaches the bound `int |phi|^2 dt <= m`, rejecting controls outside `S_M`.
    pub fn with_bound(mut self, m: f64) -> Result<Self> {
        if !(m >= 0.0) {
            return Err(Error::config(format!("control bound M must be nonnegative, got {m}")));
        }
        let e = self.energy();
        if e > m * (1.0 + 1e-12) {
            return Err(Error::config(format!(
                "control energy {e} exceeds the bound M = {m}"
            )));
        }
        self.bound_m = Some(m);
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.slow_dim + self.fast_dim
    }

    pub fn n_steps(&self) -> usize {
        self.values.len() / self.width()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let w = self.width();
        &self.values[k * w..(k + 1) * w]
    }

    pub fn slow(&self, k: usize) -> &[f64] {
        &self.row(k)[..self.slow_dim]
    }

    pub fn fast(&self, k: usize) -> &[f64] {
        &self.row(k)[self.slow_dim..]
    }

    /// `int_0^T |phi_t|^2 dt`.
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() * self.dt
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| a * v).collect(),
            bound_m: None,
            ..self.clone()
        }
    }

    /// Copy with the fast block set to zero.
    pub fn slow_part(&self) -> Self {
        let mut c = self.clone();
        c.bound_m = None;
        let (s, w) = (self.slow_dim, self.width());
        for (i, v) in c.values.iter_mut().enumerate() {
            if i % w >= s {
                *v = 0.0;
            }
        }
        c
    }

    pub fn check_dims(&self, model: &Model) -> Result<()> {
        let s = model.slow_noise.n_modes();
        let f = model.fast_noise.n_modes();
        if self.slow_dim != s || (self.fast_dim != f && self.fast_dim != 0) {
            return Err(Error::DimensionMismatch {
                expected: s + f,
                got: self.width(),
            });
        }
        Ok(())
    }

    /// CSV with columns `t, phi_0, ..., phi_{w-1}`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for j in 0..self.width() {
            let _ = write!(s, ",phi_{j}");
        }
        s.push('\n');
        for k in 0..self.n_steps() {
            let _ = write!(s, "{:.16e}", k as f64 * self.dt);
            for v in self.row(k) {
                let _ = write!(s, ",{v:.16e}");
            }
            s.push('\n');
        }
        s
    }
}

/// Skeleton solution on the `dt` mesh with running energy functionals.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonTrajectory {
    pub dt: f64,
    pub states: Vec<Field>,
    /// Running `sup_{s <= t} |X_s|_H^2`.
    pub sup_h_sq: Vec<f64>,
    /// Running `int_0^t |X_s|_V^alpha ds` (left sums).
    pub v_integral: Vec<f64>,
    pub control_energy: f64,
    pub bound_m: Option<f64>,
}

impl SkeletonTrajectory {
    pub fn terminal(&self) -> &Field {
        self.states.last().expect("trajectory has the initial state")
    }

    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    /// CSV with columns `t, x_0, ..., x_{n-1}`.
    pub fn to_csv(&self) -> String {
        let n = self.states[0].len();
        let mut s = String::from("t");
        for i in 0..n {
            let _ = write!(s, ",x_{i}");
        }
        s.push('\n');
        for (k, x) in self.states.iter().enumerate() {
            let _ = write!(s, "{:.16e}", k as f64 * self.dt);
            for v in x.values() {
                let _ = write!(s, ",{v:.16e}");
            }
            s.push('\n');
        }
        s
    }
}

/// Integrates the skeleton equation with the IMEX scheme of the slow line (no noise),
/// evaluating `fbar` through `backend`.
pub fn solve_skeleton(
    x0: &Field,
    control: &Control,
    model: &Model,
    backend: &FbarBackend,
    grid: &TimeGrid,
) -> Result<SkeletonTrajectory> {
    control.check_dims(model)?;
    model.slow_grid.check_same(x0.grid())?;
    let n_steps = grid.n_steps();
    if control.n_steps() < n_steps {
        return Err(Error::config(format!(
            "control has {} steps, time grid needs {n_steps}",
            control.n_steps()
        )));
    }
    let mut stepper = SlowStepper::new(model, grid.dt, 0.0)?;
    let h = model.slow_h();
    let v_kind = model.slow_triple().v;
    let alpha = model.slow.alpha();
    let g = model.slow_grid;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut sup_h_sq = Vec::with_capacity(n_steps + 1);
    let mut v_integral = Vec::with_capacity(n_steps + 1);
    let mut x = x0.clone();
    let mut sup = norm(&x, h)?.powi(2);
    let mut vi = 0.0;
    states.push(x.clone());
    sup_h_sq.push(sup);
    v_integral.push(vi);
    let mut next = vec![0.0; x.len()];
    for k in 0..n_steps {
        let f = fbar(&x, backend, model)?;
        vi += norm(&x, v_kind)?.powf(alpha) * grid.dt;
        stepper.step(model, x.values(), f.values(), Some(control.slow(k)), None, &mut next)?;
        let nh = norm_raw(&g, &next, h)?;
        if !nh.is_finite() || nh > BLOW_UP_RADIUS {
            return Err(Error::BlowUp { step: k + 1, norm: nh });
        }
        x = Field::from_vec_unchecked(g, next.clone());
        sup = sup.max(nh * nh);
        states.push(x.clone());
        sup_h_sq.push(sup);
        v_integral.push(vi);
    }
    Ok(SkeletonTrajectory {
        dt: grid.dt,
        states,
        sup_h_sq,
        v_integral,
        control_energy: control.energy(),
        bound_m: control.bound_m,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeConstants {
    pub c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub sup_h_sq: f64,
    pub v_integral: f64,
    pub initial_h_sq: f64,
    /// `M` used in the envelope: the control bound if set, else the control energy.
    pub m: f64,
    pub envelope: f64,
    pub finite: bool,
    pub within_envelope: bool,
}

/// Compares `sup |X|_H^2 + int |X|_V^alpha` with `C (1 + |x0|_H^2) exp(M)`.
pub fn energy_report(traj: &SkeletonTrajectory, consts: &EnvelopeConstants) -> EnergyReport {
    let sup_h_sq = *traj.sup_h_sq.last().unwrap_or(&0.0);
    let v_integral = *traj.v_integral.last().unwrap_or(&0.0);
    let initial_h_sq = traj.sup_h_sq.first().copied().unwrap_or(0.0);
    let m = traj.bound_m.unwrap_or(traj.control_energy);
    let envelope = consts.c * (1.0 + initial_h_sq) * m.exp();
    let finite = sup_h_sq.is_finite() && v_integral.is_finite();
    EnergyReport {
        sup_h_sq,
        v_integral,
        initial_h_sq,
        m,
        envelope,
        finite,
        within_envelope: finite && sup_h_sq + v_integral <= envelope,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::averaging::FbarBackend;
    use crate::field::Grid;
    use crate::models::{CouplingSpec, FastOperatorSpec, NoiseSpec, SlowOperatorSpec, XMap};
    use nalgebra::{DMatrix, DVector};

    fn linear(n: usize, a: f64, amps: Vec<f64>, coupling: CouplingSpec) -> Model {
        let g = Grid::dirichlet(n, 1.0).unwrap();
        Model::new(
            g,
            g,
            SlowOperatorSpec::LinearDiagnostic { a },
            coupling,
            NoiseSpec::additive(amps),
            FastOperatorSpec {
                c1: 0.0,
                c2: 0.0,
                g: CouplingSpec::zero(),
            },
            NoiseSpec::additive(vec![]),
        )
        .unwrap()
    }

    #[test]
    fn control_bound_and_blocks() {
        let c = Control::from_fn(10, 0.1, 2, 1, |k, j| (k + j) as f64 * 0.1);
        assert_eq!(c.slow(3), &[0.30000000000000004, 0.4][..]);
        assert_eq!(c.fast(3).len(), 1);
        let e = c.energy();
        assert!(c.clone().with_bound(e).is_ok());
        assert!(c.clone().with_bound(0.5 * e).is_err());
        let s = c.slow_part();
        assert!(s.fast(5).iter().all(|v| *v == 0.0));
        assert!(Control::new(0.1, 2, 1, vec![0.0; 7], None).is_err());
    }

    #[test]
    fn zero_problem_stays_zero() {
        let m = linear(6, 1.0, vec![1.0], CouplingSpec::zero());
        let tg = TimeGrid::new(1.0, 0.01, 0.1).unwrap();
        let c = Control::for_model(&m, &tg);
        let tr = solve_skeleton(&Field::zeros(m.slow_grid), &c, &m, &FbarBackend::linear_oracle(), &tg).unwrap();
        assert!(tr.states.iter().all(|x| x.max_abs() == 0.0));
        let r = energy_report(&tr, &EnvelopeConstants { c: 1.0 });
        assert_eq!((r.sup_h_sq, r.v_integral), (0.0, 0.0));
    }

    #[test]
    fn constant_control_matches_variation_of_constants() {
        // x' = A x + b phi e_0 with A = Lap_h, oracle by matrix exponential
        let n = 6;
        let m = linear(n, 1.0, vec![0.7], CouplingSpec::zero());
        let g = m.slow_grid;
        let x0 = Field::from_fn(g, |s| (std::f64::consts::PI * s).sin() * 0.5);
        let phi = 1.3;
        let t = 0.5;
        let a = g.laplacian_matrix();
        let b = DVector::from_vec(g.eigenmode(0).values().to_vec()) * 0.7 * phi;
        // augmented exponential gives both e^{AT} x0 and int e^{A(T-s)} b ds
        let mut aug = DMatrix::zeros(n + 1, n + 1);
        aug.view_mut((0, 0), (n, n)).copy_from(&a);
        aug.view_mut((0, n), (n, 1)).copy_from(&b);
        let e = (aug * t).exp();
        let mut z = DVector::zeros(n + 1);
        z.rows_mut(0, n).copy_from(&DVector::from_vec(x0.values().to_vec()));
        z[n] = 1.0;
        let exact = (e * z).rows(0, n).into_owned();
        let mut errs = Vec::new();
        for dt in [1e-3, 5e-4, 2.5e-4] {
            let tg = TimeGrid::new(t, dt, dt).unwrap();
            let c = Control::from_fn(tg.n_steps(), dt, 1, 0, |_, _| phi);
            let tr = solve_skeleton(&x0, &c, &m, &FbarBackend::linear_oracle(), &tg).unwrap();
            let d: f64 = tr.terminal().values().iter().zip(exact.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            errs.push(d.sqrt() / exact.norm());
        }
        assert!(errs[2] < 1e-3, "{errs:?}");
        // first order: halving dt halves the error
        for w in errs.windows(2) {
            let r = w[0] / w[1];
            assert!((1.6..2.4).contains(&r), "ratio {r}");
        }
        // Richardson extrapolation reaches the oracle at 1e-4
        let rich = 2.0 * errs[2] - errs[1];
        assert!(rich.abs() < 1e-4, "{errs:?}");
    }

    #[test]
    fn superposition_in_slow_control() {
        let m = linear(6, 1.0, vec![1.0, 0.5], CouplingSpec::zero());
        let tg = TimeGrid::new(0.4, 0.01, 0.1).unwrap();
        let c = Control::from_fn(tg.n_steps(), tg.dt, 2, 0, |k, j| ((k * 7 + j * 3) % 5) as f64 - 2.0);
        let x0 = Field::zeros(m.slow_grid);
        let b = FbarBackend::linear_oracle();
        let r1 = solve_skeleton(&x0, &c, &m, &b, &tg).unwrap();
        let r2 = solve_skeleton(&x0, &c.scaled(2.0), &m, &b, &tg).unwrap();
        for (a, bb) in r1.terminal().values().iter().zip(r2.terminal().values()) {
            assert!((2.0 * a - bb).abs() < 1e-12 * (1.0 + bb.abs()));
        }
    }

    #[test]
    fn contraction_keeps_initial_energy_as_sup() {
        let m = linear(8, 1.0, vec![1.0], CouplingSpec::zero());
        let tg = TimeGrid::new(0.5, 0.01, 0.1).unwrap();
        let x0 = Field::from_fn(m.slow_grid, |s| s * (1.0 - s));
        let tr = solve_skeleton(&x0, &Control::for_model(&m, &tg), &m, &FbarBackend::linear_oracle(), &tg).unwrap();
        let r = energy_report(&tr, &EnvelopeConstants { c: 2.0 });
        let n0 = norm(&x0, m.slow_h()).unwrap().powi(2);
        assert!((r.sup_h_sq - n0).abs() < 1e-15);
        assert!(r.within_envelope);
        assert!(tr.sup_h_sq.windows(2).all(|w| w[1] >= w[0]));
        assert!(tr.v_integral.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn envelope_monotone_in_bound() {
        let m = linear(4, 1.0, vec![1.0], CouplingSpec::zero());
        let tg = TimeGrid::new(0.2, 0.01, 0.1).unwrap();
        let c = Control::from_fn(tg.n_steps(), tg.dt, 1, 0, |_, _| 1.0);
        let e = c.energy();
        let b = FbarBackend::linear_oracle();
        let x0 = Field::constant(m.slow_grid, 0.2);
        let t1 = solve_skeleton(&x0, &c.clone().with_bound(e).unwrap(), &m, &b, &tg).unwrap();
        let t2 = solve_skeleton(&x0, &c.with_bound(2.0 * e).unwrap(), &m, &b, &tg).unwrap();
        let k = EnvelopeConstants { c: 1.0 };
        assert!(energy_report(&t2, &k).envelope >= energy_report(&t1, &k).envelope);
    }

    #[test]
    fn y_independent_forcing_is_used_directly() {
        let f = CouplingSpec::Affine {
            f0: XMap::Sine { gain: 0.8 },
            gain_y: 0.0,
        };
        let m = linear(6, 1.0, vec![1.0], f.clone());
        let tg = TimeGrid::new(0.3, 0.01, 0.1).unwrap();
        let x0 = Field::from_fn(m.slow_grid, |s| 2.0 * s);
        let c = Control::from_fn(tg.n_steps(), tg.dt, 1, 0, |k, _| (k as f64 * 0.1).cos());
        let tr = solve_skeleton(&x0, &c, &m, &FbarBackend::linear_oracle(), &tg).unwrap();
        // direct recursion with f(x) = 0.8 sin(x)
        let inv = (DMatrix::identity(6, 6) - m.slow_grid.laplacian_matrix() * tg.dt).try_inverse().unwrap();
        let e0 = m.slow_grid.eigenmode(0);
        let mut x = DVector::from_vec(x0.values().to_vec());
        for k in 0..tg.n_steps() {
            let mut rhs = x.clone();
            for i in 0..6 {
                rhs[i] += tg.dt * (0.8 * x[i].sin() + c.slow(k)[0] * e0.values()[i]);
            }
            x = &inv * rhs;
        }
        for (a, b) in tr.terminal().values().iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-13);
        }
    }
}
