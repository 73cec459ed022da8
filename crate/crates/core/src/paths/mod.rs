//! Time integration of the coupled, controlled, frozen and auxiliary systems with a
//! semi-implicit Euler-Maruyama scheme: the stiff linear operator is implicit,
//! everything else explicit.

pub mod driver;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use driver::{Line, NormalStream, WienerDriver};

use crate::error::{Error, Result};
use crate::field::{norm_raw, Field, NormKind};
use crate::models::Model;
use crate::skeleton::Control;

/// Guard radius in the pivot norm; exceeding it aborts the path with `BlowUp`.
pub const BLOW_UP_RADIUS: f64 = 1e6;

/// Largest admissible `dt / delta` for the fast line.
pub const FAST_STEP_RATIO: f64 = 1.0 / 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub epsilon: f64,
    pub delta: f64,
}

impl ScaleParams {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && delta > 0.0 && epsilon.is_finite() && delta.is_finite()) {
            return Err(Error::config(format!(
                "scales need epsilon, delta > 0, got epsilon={epsilon}, delta={delta}"
            )));
        }
        Ok(Self { epsilon, delta })
    }

    /// `delta / epsilon`, which must go to zero along a schedule.
    pub fn regime(&self) -> f64 {
        self.delta / self.epsilon
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_end: f64,
    pub dt: f64,
    pub zeta: f64,
}

fn steps_of(len: f64, dt: f64, what: &str) -> Result<usize> {
    let k = (len / dt).round();
    if k < 1.0 || (k * dt - len).abs() > 1e-9 * len.max(dt) {
        return Err(Error::config(format!(
            "{what} = {len} must be a positive integer multiple of dt = {dt}"
        )));
    }
    Ok(k as usize)
}

impl TimeGrid {
    pub fn new(t_end: f64, dt: f64, zeta: f64) -> Result<Self> {
        if !(dt > 0.0 && t_end > 0.0 && zeta > 0.0) {
            return Err(Error::config("time grid needs T, dt, zeta > 0"));
        }
        if zeta > t_end * (1.0 + 1e-12) || dt > zeta * (1.0 + 1e-12) {
            return Err(Error::config(format!(
                "time grid needs dt <= zeta <= T, got dt={dt}, zeta={zeta}, T={t_end}"
            )));
        }
        steps_of(t_end, dt, "T")?;
        steps_of(zeta, dt, "zeta")?;
        Ok(Self { t_end, dt, zeta })
    }

    /// `zeta = sqrt(delta)` snapped to the nearest multiple of `dt` (at least one step).
    pub fn with_sqrt_delta_zeta(t_end: f64, dt: f64, delta: f64) -> Result<Self> {
        let b = (delta.sqrt() / dt).round().max(1.0);
        Self::new(t_end, dt, (b * dt).min(t_end))
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    pub fn block_steps(&self) -> usize {
        (self.zeta / self.dt).round() as usize
    }

    /// Step index of `t(zeta) = floor(t / zeta) zeta` for `t = step * dt`.
    pub fn block_start(&self, step: usize) -> usize {
        let b = self.block_steps();
        (step / b) * b
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlowFastState {
    pub x: Field,
    pub y: Field,
    pub t: f64,
}

fn inverse(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.try_inverse()
        .ok_or_else(|| Error::Singular(format!("implicit {what} operator is not invertible")))
}

fn matvec(a: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let n = x.len();
    let cols = a.as_slice();
    out.fill(0.0);
    for (j, &xj) in x.iter().enumerate() {
        for (o, &aij) in out.iter_mut().zip(&cols[j * n..(j + 1) * n]) {
            *o += aij * xj;
        }
    }
}

/// `out += m * B c` for a row-major `n x k` basis.
fn add_basis(basis: &[f64], k: usize, m: f64, c: &[f64], out: &mut [f64]) {
    if k == 0 || m == 0.0 {
        return;
    }
    for (i, o) in out.iter_mut().enumerate() {
        let row = &basis[i * k..(i + 1) * k];
        let mut s = 0.0;
        for (b, ci) in row.iter().zip(c) {
            s += b * ci;
        }
        *o += m * s;
    }
}

fn guard(grid: &crate::field::Grid, v: &[f64], kind: NormKind, step: usize) -> Result<()> {
    let r2 = BLOW_UP_RADIUS * BLOW_UP_RADIUS;
    let l2_sq = grid.spacing() * v.iter().map(|a| a * a).sum::<f64>();
    let n = match kind {
        NormKind::L2 => l2_sq.sqrt(),
        // |u|_{-1} <= |u|_2 / sqrt(lambda_min); skip the solve when that already passes
        NormKind::Hm1Dual if l2_sq.is_finite() && l2_sq <= r2 * grid.lambda_min() => return Ok(()),
        _ => norm_raw(grid, v, kind)?,
    };
    if !n.is_finite() || n > BLOW_UP_RADIUS {
        return Err(Error::BlowUp { step, norm: n });
    }
    Ok(())
}

/// One slow step `X -> (I - dt L)^-1 [X + dt (N(X) + F) + m(X) B (dt phi + sqrt(eps dt) xi)]`
/// where `L` is the implicit part of the slow operator, `N` the explicit remainder
/// and `F` a forcing supplied by the caller (`f(X, Y)` or the averaged `fbar(X)`).
pub struct SlowStepper {
    dt: f64,
    noise_scale: f64,
    pub(crate) inv: DMatrix<f64>,
    pub(crate) basis: Vec<f64>,
    m: usize,
    explicit: bool,
    rhs: Vec<f64>,
    tmp: Vec<f64>,
    coef: Vec<f64>,
}

impl SlowStepper {
    pub fn new(model: &Model, dt: f64, epsilon: f64) -> Result<Self> {
        let n = model.n();
        let l = model.slow_implicit_matrix();
        let inv = inverse(DMatrix::identity(n, n) - l * dt, "slow")?;
        let m = model.slow_noise.n_modes();
        Ok(Self {
            dt,
            noise_scale: (epsilon * dt).sqrt(),
            inv,
            basis: model.slow_noise.basis(&model.slow_grid),
            m,
            explicit: model.slow_explicit_has_jacobian(),
            rhs: vec![0.0; n],
            tmp: vec![0.0; n],
            coef: vec![0.0; m],
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub(crate) fn step(
        &mut self,
        model: &Model,
        x: &[f64],
        forcing: &[f64],
        phi: Option<&[f64]>,
        xi: Option<&[f64]>,
        out: &mut [f64],
    ) -> Result<()> {
        if self.explicit {
            model.slow_explicit_into(x, &mut self.tmp);
            for i in 0..x.len() {
                self.rhs[i] = x[i] + self.dt * (self.tmp[i] + forcing[i]);
            }
        } else {
            for i in 0..x.len() {
                self.rhs[i] = x[i] + self.dt * forcing[i];
            }
        }
        if self.m > 0 && (phi.is_some() || xi.is_some()) {
            for k in 0..self.m {
                let mut c = 0.0;
                if let Some(p) = phi {
                    c += self.dt * p[k];
                }
                if let Some(z) = xi {
                    c += self.noise_scale * z[k];
                }
                self.coef[k] = c;
            }
            let mult = model.slow_noise.multiplier_raw(&model.slow_grid, x)?;
            add_basis(&self.basis, self.m, mult, &self.coef, &mut self.rhs);
        }
        matvec(&self.inv, &self.rhs, out);
        Ok(())
    }
}

/// One fast step `Y -> (I - dt s Lap)^-1 [Y + dt s E(x, Y) + m(Y) B (dt c phi + r sqrt(dt) xi)]`
/// with drift scale `s`, control scale `c` and noise scale `r`.
pub struct FastStepper {
    dt: f64,
    drift_scale: f64,
    control_scale: f64,
    noise_scale: f64,
    inv: DMatrix<f64>,
    basis: Vec<f64>,
    m: usize,
    rhs: Vec<f64>,
    tmp: Vec<f64>,
    coef: Vec<f64>,
}

impl FastStepper {
    pub fn new(model: &Model, dt: f64, drift_scale: f64, control_scale: f64, noise_scale: f64) -> Result<Self> {
        let n = model.n();
        let lap = model.fast_grid.laplacian_matrix();
        let inv = inverse(DMatrix::identity(n, n) - lap * (dt * drift_scale), "fast")?;
        let m = model.fast_noise.n_modes();
        Ok(Self {
            dt,
            drift_scale,
            control_scale,
            noise_scale: noise_scale * dt.sqrt(),
            inv,
            basis: model.fast_noise.basis(&model.fast_grid),
            m,
            rhs: vec![0.0; n],
            tmp: vec![0.0; n],
            coef: vec![0.0; m],
        })
    }

    /// Fast line of the coupled system: drift `1/delta`, noise `1/sqrt(delta)`,
    /// control `1/sqrt(delta epsilon)`.
    pub fn coupled(model: &Model, dt: f64, scales: &ScaleParams) -> Result<Self> {
        Self::new(
            model,
            dt,
            1.0 / scales.delta,
            1.0 / (scales.delta * scales.epsilon).sqrt(),
            1.0 / scales.delta.sqrt(),
        )
    }

    /// Frozen equation on time scale one.
    pub fn frozen(model: &Model, dt: f64) -> Result<Self> {
        Self::new(model, dt, 1.0, 0.0, 1.0)
    }

    pub(crate) fn step(
        &mut self,
        model: &Model,
        x: &[f64],
        y: &[f64],
        phi: Option<&[f64]>,
        xi: Option<&[f64]>,
        out: &mut [f64],
    ) -> Result<()> {
        model.fast.explicit_into(x, y, &mut self.tmp);
        let a = self.dt * self.drift_scale;
        for i in 0..y.len() {
            self.rhs[i] = y[i] + a * self.tmp[i];
        }
        if self.m > 0 && (phi.is_some() || xi.is_some()) {
            for k in 0..self.m {
                let mut c = 0.0;
                if let Some(p) = phi {
                    c += self.dt * self.control_scale * p[k];
                }
                if let Some(z) = xi {
                    c += self.noise_scale * z[k];
                }
                self.coef[k] = c;
            }
            let mult = model.fast_noise.multiplier_raw(&model.fast_grid, y)?;
            add_basis(&self.basis, self.m, mult, &self.coef, &mut self.rhs);
        }
        matvec(&self.inv, &self.rhs, out);
        Ok(())
    }
}

/// Stepper for the coupled (optionally controlled) slow-fast system along one path.
pub struct CoupledIntegrator<'a> {
    model: &'a Model,
    grid: TimeGrid,
    slow: SlowStepper,
    fast: FastStepper,
    slow_stream: NormalStream,
    fast_stream: NormalStream,
    evolve_fast: bool,
    forcing: Vec<f64>,
    xi_s: Vec<f64>,
    xi_f: Vec<f64>,
    xn: Vec<f64>,
    yn: Vec<f64>,
}

impl<'a> CoupledIntegrator<'a> {
    pub fn new(model: &'a Model, scales: &ScaleParams, grid: &TimeGrid, driver: &WienerDriver) -> Result<Self> {
        let n = model.n();
        check_driver(model, driver)?;
        Ok(Self {
            model,
            grid: *grid,
            slow: SlowStepper::new(model, grid.dt, scales.epsilon)?,
            fast: FastStepper::coupled(model, grid.dt, scales)?,
            slow_stream: driver.stream(Line::Slow),
            fast_stream: driver.stream(Line::Fast),
            evolve_fast: true,
            forcing: vec![0.0; n],
            xi_s: vec![0.0; model.slow_noise.n_modes()],
            xi_f: vec![0.0; model.fast_noise.n_modes()],
            xn: vec![0.0; n],
            yn: vec![0.0; n],
        })
    }

    /// When the slow forcing ignores `y`, the fast line has no influence on `X`
    /// and may be skipped; `Y` then stays at its initial value.
    pub fn set_evolve_fast(&mut self, on: bool) {
        self.evolve_fast = on;
    }

    /// Advances `state` from step `step` to `step + 1`.
    pub fn step(&mut self, state: &mut SlowFastState, step: usize, control: Option<&Control>) -> Result<()> {
        let m = self.model;
        let x = state.x.values();
        let y = state.y.values();
        m.coupling.apply_into(x, y, &mut self.forcing);
        self.slow_stream.fill(step as u64, &mut self.xi_s);
        let phi_s = control.map(|c| c.slow(step));
        self.slow.step(m, x, &self.forcing, phi_s, Some(&self.xi_s), &mut self.xn)?;
        if self.evolve_fast {
            self.fast_stream.fill(step as u64, &mut self.xi_f);
            let phi_f = control.map(|c| c.fast(step)).filter(|p| !p.is_empty());
            self.fast.step(m, x, y, phi_f, Some(&self.xi_f), &mut self.yn)?;
        }
        guard(&m.slow_grid, &self.xn, m.slow_h(), step + 1)?;
        state.x.swap_values(&mut self.xn);
        if self.evolve_fast {
            guard(&m.fast_grid, &self.yn, NormKind::L2, step + 1)?;
            state.y.swap_values(&mut self.yn);
        }
        state.t = self.grid.time(step + 1);
        Ok(())
    }

    /// Runs the whole grid, calling `observe(step, state)` at step 0 and after every step.
    pub fn run(
        &mut self,
        x0: &Field,
        y0: &Field,
        control: Option<&Control>,
        mut observe: impl FnMut(usize, &SlowFastState),
    ) -> Result<SlowFastState> {
        let mut state = SlowFastState {
            x: x0.clone(),
            y: y0.clone(),
            t: 0.0,
        };
        observe(0, &state);
        for k in 0..self.grid.n_steps() {
            self.step(&mut state, k, control)?;
            observe(k + 1, &state);
        }
        Ok(state)
    }
}

fn check_driver(model: &Model, driver: &WienerDriver) -> Result<()> {
    if driver.n_modes_slow < model.slow_noise.n_modes() || driver.n_modes_fast < model.fast_noise.n_modes() {
        return Err(Error::DimensionMismatch {
            expected: model.slow_noise.n_modes().max(model.fast_noise.n_modes()),
            got: driver.n_modes_slow.min(driver.n_modes_fast),
        });
    }
    Ok(())
}

fn check_contract(scales: &ScaleParams, grid: &TimeGrid) -> Result<()> {
    if grid.dt > scales.delta * FAST_STEP_RATIO * (1.0 + 1e-9) {
        return Err(Error::config(format!(
            "dt = {} violates the fast-scale rule dt <= delta/20 (delta = {})",
            grid.dt, scales.delta
        )));
    }
    Ok(())
}

fn step_index(state: &SlowFastState, grid: &TimeGrid) -> usize {
    (state.t / grid.dt).round() as usize
}

/// One step of the coupled system.
pub fn step_coupled(
    state: &SlowFastState,
    model: &Model,
    scales: &ScaleParams,
    grid: &TimeGrid,
    driver: &WienerDriver,
) -> Result<SlowFastState> {
    check_contract(scales, grid)?;
    let mut it = CoupledIntegrator::new(model, scales, grid, driver)?;
    let mut s = state.clone();
    it.step(&mut s, step_index(state, grid), None)?;
    Ok(s)
}

/// One step of the controlled system.
pub fn step_controlled(
    state: &SlowFastState,
    model: &Model,
    scales: &ScaleParams,
    grid: &TimeGrid,
    driver: &WienerDriver,
    control: &Control,
) -> Result<SlowFastState> {
    check_contract(scales, grid)?;
    control.check_dims(model)?;
    let mut it = CoupledIntegrator::new(model, scales, grid, driver)?;
    let mut s = state.clone();
    it.step(&mut s, step_index(state, grid), Some(control))?;
    Ok(s)
}

/// Full coupled path. The fast-scale step rule is enforced whenever the fast line
/// is integrated; with `skip_decoupled_fast` and a `y`-independent forcing it is skipped.
pub fn simulate_coupled(
    model: &Model,
    scales: &ScaleParams,
    grid: &TimeGrid,
    driver: &WienerDriver,
    x0: &Field,
    y0: &Field,
    control: Option<&Control>,
    skip_decoupled_fast: bool,
    observe: impl FnMut(usize, &SlowFastState),
) -> Result<SlowFastState> {
    let evolve_fast = !(skip_decoupled_fast && !model.coupling.depends_on_y());
    if evolve_fast {
        check_contract(scales, grid)?;
    }
    if let Some(c) = control {
        c.check_dims(model)?;
        if c.n_steps() < grid.n_steps() {
            return Err(Error::config("control is shorter than the time grid"));
        }
    }
    let mut it = CoupledIntegrator::new(model, scales, grid, driver)?;
    it.set_evolve_fast(evolve_fast);
    it.run(x0, y0, control, observe)
}

/// Fast states sampled every `dt`, including the initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct FastTrajectory {
    pub dt: f64,
    pub states: Vec<Field>,
}

/// Frozen fast dynamics with `x` fixed, calling `visit(step, y)` for step 0..=n_steps.
/// Returns the terminal state.
pub fn frozen_run(
    x: &Field,
    y0: &Field,
    model: &Model,
    n_steps: usize,
    dt: f64,
    driver: &WienerDriver,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<Field> {
    check_driver(model, driver)?;
    let mut st = FastStepper::frozen(model, dt)?;
    let mut stream = driver.stream(Line::Fast);
    let mut xi = vec![0.0; model.fast_noise.n_modes()];
    let mut y = y0.values().to_vec();
    let mut yn = vec![0.0; y.len()];
    visit(0, &y);
    for k in 0..n_steps {
        stream.fill(k as u64, &mut xi);
        st.step(model, x.values(), &y, None, Some(&xi), &mut yn)?;
        guard(&model.fast_grid, &yn, NormKind::L2, k + 1)?;
        std::mem::swap(&mut y, &mut yn);
        visit(k + 1, &y);
    }
    Ok(Field::from_vec_unchecked(model.fast_grid, y))
}

pub fn simulate_frozen(
    x: &Field,
    y0: &Field,
    model: &Model,
    horizon: f64,
    dt: f64,
    driver: &WienerDriver,
) -> Result<FastTrajectory> {
    let n_steps = steps_of(horizon, dt, "horizon")?;
    let mut states = Vec::with_capacity(n_steps + 1);
    let g = model.fast_grid;
    frozen_run(x, y0, model, n_steps, dt, driver, |_, y| {
        states.push(Field::from_vec_unchecked(g, y.to_vec()))
    })?;
    Ok(FastTrajectory { dt, states })
}

/// Khasminskii auxiliary fast process: on each block `[k zeta, (k+1) zeta)` the slow
/// argument is frozen at `slow_snapshots[k]`. Uses the fast line of `driver`, so it is
/// synchronously coupled with the fast component of a coupled path on the same driver.
pub fn simulate_auxiliary(
    slow_snapshots: &[Field],
    y0: &Field,
    model: &Model,
    scales: &ScaleParams,
    grid: &TimeGrid,
    driver: &WienerDriver,
) -> Result<FastTrajectory> {
    let mut states = Vec::with_capacity(grid.n_steps() + 1);
    let g = model.fast_grid;
    auxiliary_run(slow_snapshots, y0, model, scales, grid, driver, |_, y| {
        states.push(Field::from_vec_unchecked(g, y.to_vec()))
    })?;
    Ok(FastTrajectory { dt: grid.dt, states })
}

pub fn auxiliary_run(
    slow_snapshots: &[Field],
    y0: &Field,
    model: &Model,
    scales: &ScaleParams,
    grid: &TimeGrid,
    driver: &WienerDriver,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<Field> {
    check_contract(scales, grid)?;
    check_driver(model, driver)?;
    let n_steps = grid.n_steps();
    let b = grid.block_steps();
    let needed = (n_steps - 1) / b + 1;
    if slow_snapshots.len() < needed {
        return Err(Error::config(format!(
            "auxiliary process needs {needed} slow snapshots, got {}",
            slow_snapshots.len()
        )));
    }
    let mut st = FastStepper::coupled(model, grid.dt, scales)?;
    let mut stream = driver.stream(Line::Fast);
    let mut xi = vec![0.0; model.fast_noise.n_modes()];
    let mut y = y0.values().to_vec();
    let mut yn = vec![0.0; y.len()];
    visit(0, &y);
    for k in 0..n_steps {
        stream.fill(k as u64, &mut xi);
        let xs = &slow_snapshots[k / b];
        st.step(model, xs.values(), &y, None, Some(&xi), &mut yn)?;
        guard(&model.fast_grid, &yn, NormKind::L2, k + 1)?;
        std::mem::swap(&mut y, &mut yn);
        visit(k + 1, &y);
    }
    Ok(Field::from_vec_unchecked(model.fast_grid, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Grid;
    use crate::models::{CouplingSpec, FastOperatorSpec, NoiseSpec, SlowOperatorSpec, XMap};
    use nalgebra::DVector;

    fn model(n: usize, a: f64, slow_amps: Vec<f64>, coupling: CouplingSpec, fast: FastOperatorSpec, fast_amps: Vec<f64>) -> Model {
        let g = Grid::dirichlet(n, 1.0).unwrap();
        Model::new(
            g,
            g,
            SlowOperatorSpec::LinearDiagnostic { a },
            coupling,
            NoiseSpec::additive(slow_amps),
            fast,
            NoiseSpec::additive(fast_amps),
        )
        .unwrap()
    }

    fn linear_fast(c1: f64, g: CouplingSpec) -> FastOperatorSpec {
        FastOperatorSpec { c1, c2: 0.0, g }
    }

    fn sine_g() -> CouplingSpec {
        CouplingSpec::Affine {
            f0: XMap::Sine { gain: 1.0 },
            gain_y: 0.0,
        }
    }

    #[test]
    fn no_drift_no_noise_is_stationary() {
        let m = model(4, 0.0, vec![0.0], CouplingSpec::zero(), linear_fast(0.0, CouplingSpec::zero()), vec![0.0]);
        let scales = ScaleParams::new(0.5, 0.25).unwrap();
        let tg = TimeGrid::new(0.1, 0.01, 0.05).unwrap();
        let x = Field::from_fn(m.slow_grid, |s| s.sin());
        let st = SlowFastState {
            x: x.clone(),
            y: Field::zeros(m.fast_grid),
            t: 0.0,
        };
        let d = WienerDriver::new(1, 0, 1, 1);
        let s1 = step_coupled(&st, &m, &scales, &tg, &d).unwrap();
        assert_eq!(s1.x, x);
        assert_eq!(s1.y.max_abs(), 0.0);
        assert!((s1.t - 0.01).abs() < 1e-15);
    }

    #[test]
    fn scalar_mean_decays_at_lowest_eigenvalue() {
        let m = model(2, 1.0, vec![1.0], CouplingSpec::zero(), linear_fast(0.0, CouplingSpec::zero()), vec![]);
        let g = m.slow_grid;
        let lam = g.eigenvalue(0);
        let scales = ScaleParams::new(1.0, 1.0).unwrap();
        let tg = TimeGrid::new(0.1, 2.5e-4, 2.5e-4).unwrap();
        let e0 = g.eigenmode(0);
        let x0 = e0.clone();
        let h = g.spacing();
        let n_paths = 10_000u64;
        let coef: Vec<f64> = crate::parallel::par_map(n_paths, |p| {
            let d = WienerDriver::new(5, p, 1, 0);
            let y0 = Field::zeros(m.fast_grid);
            let s = simulate_coupled(&m, &scales, &tg, &d, &x0, &y0, None, true, |_, _| {})?;
            Ok(h * s.x.values().iter().zip(e0.values()).map(|(a, b)| a * b).sum::<f64>())
        })
        .unwrap();
        let mean = coef.iter().sum::<f64>() / n_paths as f64;
        let var = coef.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n_paths - 1) as f64;
        let se = (var / n_paths as f64).sqrt();
        let exact = (-lam * 0.1).exp();
        assert!((mean - exact).abs() < 3.0 * se, "mean {mean} exact {exact} se {se}");
    }

    #[test]
    fn paths_replay_bit_identically() {
        let m = model(6, 1.0, vec![1.0, 0.5], sine_g(), linear_fast(1.0, sine_g()), vec![1.0]);
        let scales = ScaleParams::new(0.3, 0.09).unwrap();
        let tg = TimeGrid::new(0.2, 0.002, 0.02).unwrap();
        let d = WienerDriver::new(99, 17, 2, 1);
        let x0 = Field::from_fn(m.slow_grid, |s| s);
        let y0 = Field::zeros(m.fast_grid);
        let a = simulate_coupled(&m, &scales, &tg, &d, &x0, &y0, None, false, |_, _| {}).unwrap();
        let b = simulate_coupled(&m, &scales, &tg, &d, &x0, &y0, None, false, |_, _| {}).unwrap();
        assert_eq!(a, b);
        let c = simulate_coupled(&m, &scales, &tg, &d.with_path(18), &x0, &y0, None, false, |_, _| {}).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn zero_control_equals_uncontrolled_step() {
        let m = model(5, 1.0, vec![1.0], sine_g(), linear_fast(0.5, sine_g()), vec![0.7]);
        let scales = ScaleParams::new(0.2, 0.04).unwrap();
        let tg = TimeGrid::new(0.1, 0.002, 0.02).unwrap();
        let d = WienerDriver::new(3, 2, 1, 1);
        let st = SlowFastState {
            x: Field::constant(m.slow_grid, 0.3),
            y: Field::constant(m.fast_grid, -0.2),
            t: 0.004,
        };
        let c = Control::for_model(&m, &tg);
        let a = step_coupled(&st, &m, &scales, &tg, &d).unwrap();
        let b = step_controlled(&st, &m, &scales, &tg, &d, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_slow_control_adds_mode_drift() {
        let m = model(5, 0.0, vec![0.8, 0.3], CouplingSpec::zero(), linear_fast(0.0, CouplingSpec::zero()), vec![1.0]);
        let scales = ScaleParams::new(1.0, 1.0).unwrap();
        let tg = TimeGrid::new(0.1, 0.01, 0.01).unwrap();
        let d = WienerDriver::new(3, 2, 2, 1);
        let st = SlowFastState {
            x: Field::constant(m.slow_grid, 0.3),
            y: Field::zeros(m.fast_grid),
            t: 0.0,
        };
        let phi = [1.5, -2.0];
        let c = Control::from_fn(tg.n_steps(), tg.dt, 2, 1, |_, j| if j < 2 { phi[j] } else { 0.0 });
        let a = step_coupled(&st, &m, &scales, &tg, &d).unwrap();
        let b = step_controlled(&st, &m, &scales, &tg, &d, &c).unwrap();
        let (e0, e1) = (m.slow_grid.eigenmode(0), m.slow_grid.eigenmode(1));
        for i in 0..5 {
            let want = tg.dt * (0.8 * phi[0] * e0.values()[i] + 0.3 * phi[1] * e1.values()[i]);
            assert!((b.x.values()[i] - a.x.values()[i] - want).abs() < 1e-14);
        }
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn linear_frozen_mean_matches_matrix_exponential() {
        let n = 6;
        let m = model(n, 1.0, vec![], CouplingSpec::zero(), linear_fast(2.0, sine_g()), vec![1.0, 0.5, 0.25]);
        let g = m.fast_grid;
        let x = Field::from_fn(m.slow_grid, |s| 1.5 * (3.0 * s).cos());
        let y0 = Field::from_fn(g, |s| s - 0.5);
        let (t, dt) = (0.3, 2e-4);
        let a = g.laplacian_matrix() + DMatrix::identity(n, n) * 2.0;
        let gx = DVector::from_iterator(n, x.values().iter().map(|v| v.sin()));
        let ainv_g = a.clone().try_inverse().unwrap() * &gx;
        let exact = -&ainv_g + (a * t).exp() * (DVector::from_vec(y0.values().to_vec()) + &ainv_g);
        let n_paths = 4000u64;
        let ends = crate::parallel::par_map(n_paths, |p| {
            let d = WienerDriver::new(8, p, 0, 3);
            let tr = simulate_frozen(&x, &y0, &m, t, dt, &d)?;
            Ok(tr.states.last().unwrap().values().to_vec())
        })
        .unwrap();
        for i in 0..n {
            let v: Vec<f64> = ends.iter().map(|e| e[i]).collect();
            let mean = v.iter().sum::<f64>() / n_paths as f64;
            let var = v.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n_paths - 1) as f64;
            let se = (var / n_paths as f64).sqrt();
            assert!((mean - exact[i]).abs() < 3.0 * se + 2e-3 * exact[i].abs(), "node {i}: {mean} vs {}", exact[i]);
        }
    }

    #[test]
    fn frozen_without_noise_rests_at_fixed_point() {
        let n = 5;
        let m = model(n, 1.0, vec![], CouplingSpec::zero(), linear_fast(1.0, sine_g()), vec![0.0]);
        let g = m.fast_grid;
        let x = Field::constant(m.slow_grid, 0.4);
        let a = g.laplacian_matrix() + DMatrix::identity(n, n);
        let gx = DVector::from_element(n, 0.4f64.sin());
        let fp = -(a.try_inverse().unwrap() * gx);
        let y0 = Field::new(g, fp.iter().copied().collect()).unwrap();
        let tr = simulate_frozen(&x, &y0, &m, 0.5, 0.01, &WienerDriver::new(1, 0, 0, 1)).unwrap();
        for s in &tr.states {
            for (a, b) in s.values().iter().zip(y0.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn auxiliary_with_constant_slow_path_is_rescaled_frozen() {
        let m = model(4, 1.0, vec![1.0], sine_g(), linear_fast(1.0, sine_g()), vec![1.0, 0.5]);
        let delta = 0.01;
        let scales = ScaleParams::new(0.1, delta).unwrap();
        let tg = TimeGrid::new(0.2, 5e-4, 0.1).unwrap();
        let x = Field::constant(m.slow_grid, 0.7);
        let y0 = Field::constant(m.fast_grid, 0.1);
        let d = WienerDriver::new(12, 4, 1, 2);
        let snaps = vec![x.clone(); 2];
        let aux = simulate_auxiliary(&snaps, &y0, &m, &scales, &tg, &d).unwrap();
        let fr = simulate_frozen(&x, &y0, &m, tg.t_end / delta, tg.dt / delta, &d).unwrap();
        assert_eq!(aux.states.len(), fr.states.len());
        for (a, b) in aux.states.iter().zip(&fr.states) {
            for (u, v) in a.values().iter().zip(b.values()) {
                assert!((u - v).abs() < 1e-12 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn single_block_uses_initial_slow_state() {
        let m = model(4, 1.0, vec![1.0], sine_g(), linear_fast(1.0, sine_g()), vec![1.0]);
        let scales = ScaleParams::new(0.1, 0.01).unwrap();
        let tg = TimeGrid::new(0.05, 5e-4, 0.05).unwrap();
        let d = WienerDriver::new(12, 4, 1, 1);
        let y0 = Field::zeros(m.fast_grid);
        let x0 = Field::constant(m.slow_grid, 0.3);
        let only = simulate_auxiliary(std::slice::from_ref(&x0), &y0, &m, &scales, &tg, &d).unwrap();
        let extra = vec![x0.clone(), Field::constant(m.slow_grid, 9.0)];
        let with_more = simulate_auxiliary(&extra, &y0, &m, &scales, &tg, &d).unwrap();
        assert_eq!(only, with_more);
    }

    #[test]
    fn auxiliary_matches_coupled_fast_line_when_slow_is_constant() {
        // a = 0, no slow noise, f = 0: X stays at x0, so Y and Y-hat share the recursion
        let m = model(4, 0.0, vec![0.0], CouplingSpec::zero(), linear_fast(1.0, sine_g()), vec![1.0]);
        let scales = ScaleParams::new(0.1, 0.01).unwrap();
        let tg = TimeGrid::new(0.1, 5e-4, 0.01).unwrap();
        let d = WienerDriver::new(2, 9, 1, 1);
        let x0 = Field::constant(m.slow_grid, 0.3);
        let y0 = Field::zeros(m.fast_grid);
        let mut ys = Vec::new();
        simulate_coupled(&m, &scales, &tg, &d, &x0, &y0, None, false, |_, s| ys.push(s.y.clone())).unwrap();
        let snaps = vec![x0.clone(); 10];
        let aux = simulate_auxiliary(&snaps, &y0, &m, &scales, &tg, &d).unwrap();
        assert_eq!(ys, aux.states);
    }

    #[test]
    fn fast_step_rule_enforced() {
        let m = model(4, 1.0, vec![1.0], sine_g(), linear_fast(1.0, sine_g()), vec![1.0]);
        let scales = ScaleParams::new(0.1, 0.01).unwrap();
        let tg = TimeGrid::new(0.1, 0.001, 0.01).unwrap();
        let d = WienerDriver::new(2, 9, 1, 1);
        let f = Field::zeros(m.slow_grid);
        let r = simulate_coupled(&m, &scales, &tg, &d, &f, &f, None, false, |_, _| {});
        assert!(matches!(r, Err(Error::Config(ref s)) if s.contains("delta/20")));
    }

    #[test]
    fn first_order_weak_error() {
        // deterministic mean recursion of the linear scalar case
        let m = model(2, 1.0, vec![0.0], CouplingSpec::zero(), linear_fast(0.0, CouplingSpec::zero()), vec![]);
        let g = m.slow_grid;
        let x0 = g.eigenmode(0);
        let exact = (-g.eigenvalue(0) * 0.5).exp();
        let scales = ScaleParams::new(1.0, 1.0).unwrap();
        let d = WienerDriver::new(1, 0, 1, 0);
        let mut errs = Vec::new();
        for dt in [0.01, 0.005, 0.0025, 0.00125] {
            let tg = TimeGrid::new(0.5, dt, dt).unwrap();
            let s = simulate_coupled(&m, &scales, &tg, &d, &x0, &Field::zeros(g), None, true, |_, _| {}).unwrap();
            errs.push((s.x.values()[0] / x0.values()[0] - exact).abs());
        }
        for w in errs.windows(2) {
            let r = w[0] / w[1];
            assert!((1.5..3.0).contains(&r), "{errs:?}");
        }
    }

    #[test]
    fn time_grid_validation() {
        assert!(TimeGrid::new(1.0, 0.1, 0.25).is_err());
        assert!(TimeGrid::new(1.0, 0.1, 2.0).is_err());
        let tg = TimeGrid::with_sqrt_delta_zeta(1.0, 0.001, 0.0004).unwrap();
        assert_eq!(tg.block_steps(), 20);
        assert_eq!(tg.block_start(47), 40);
    }
}
