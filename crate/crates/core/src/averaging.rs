//! Averaged coefficient `fbar(x) = int f(x, z) mu^x(dz)` over the invariant measure
//! of the frozen fast process, invariant-measure sampling and ergodicity fits.

use std::collections::HashMap;
use std::sync::RwLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{norm, norm_raw, Field, NormKind};
use crate::models::{coupling_f, CouplingSpec, Model, XMap};
use crate::parallel::par_map;
use crate::paths::{frozen_run, WienerDriver};

/// Path indices reserved for the replicas of ergodic averages, far from ensemble indices.
pub const REPLICA_PATH_BASE: u64 = 1 << 40;

/// Default quantization step of the cache, per mode coefficient in the pivot norm.
pub const DEFAULT_QUANTIZATION: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FbarMode {
    /// Time average of `f(x, Y_t)` over `[burn_in, horizon]` along `n_replicas`
    /// frozen paths started at zero.
    ErgodicAverage {
        burn_in: f64,
        horizon: f64,
        n_replicas: usize,
        dt: f64,
    },
    /// Stationary mean of a linear fast drift: `fbar(x) = f(x, m(x))`, `m(x) = -A^-1 g0(x)`.
    LinearOracle,
}

/// Evaluation strategy for `fbar` together with its quantized cache. The cache has a
/// single writer; readers proceed concurrently between writes.
#[derive(Debug)]
pub struct FbarBackend {
    pub mode: FbarMode,
    pub quantization: f64,
    pub use_cache: bool,
    /// Replica standard error (pivot norm) above which `NonConvergence` is raised.
    pub tolerance: f64,
    pub master_seed: u64,
    cache: RwLock<HashMap<Vec<i64>, Field>>,
}

impl Clone for FbarBackend {
    fn clone(&self) -> Self {
        Self {
            mode: self.mode.clone(),
            quantization: self.quantization,
            use_cache: self.use_cache,
            tolerance: self.tolerance,
            master_seed: self.master_seed,
            cache: RwLock::new(HashMap::new()),
        }
    }
}

impl FbarBackend {
    pub fn new(mode: FbarMode, master_seed: u64) -> Result<Self> {
        if let FbarMode::ErgodicAverage {
            burn_in,
            horizon,
            n_replicas,
            dt,
        } = mode
        {
            if !(burn_in >= 0.0 && burn_in < horizon && dt > 0.0 && n_replicas >= 1) {
                return Err(Error::config(format!(
                    "ergodic average needs 0 <= burn_in < horizon, dt > 0, n_replicas >= 1 \
                     (burn_in={burn_in}, horizon={horizon}, dt={dt}, n_replicas={n_replicas})"
                )));
            }
        }
        Ok(Self {
            mode,
            quantization: DEFAULT_QUANTIZATION,
            use_cache: true,
            tolerance: f64::INFINITY,
            master_seed,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn linear_oracle() -> Self {
        Self::new(FbarMode::LinearOracle, 0).expect("valid")
    }

    pub fn with_cache(mut self, on: bool) -> Self {
        self.use_cache = on;
        self
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    pub fn with_quantization(mut self, q: f64) -> Self {
        self.quantization = q;
        self
    }

    pub fn cache_len(&self) -> usize {
        self.cache.read().map(|c| c.len()).unwrap_or(0)
    }

    /// Whether the evaluation is a deterministic closed form (no cache needed).
    fn is_exact(&self, model: &Model) -> bool {
        !model.coupling.depends_on_y() || matches!(self.mode, FbarMode::LinearOracle)
    }

    /// Quantization key and representative point of `x`.
    pub fn quantize(&self, model: &Model, x: &Field) -> Result<(Vec<i64>, Field)> {
        let grid = *x.grid();
        let h = grid.spacing();
        let hm1 = model.slow_h() == NormKind::Hm1Dual;
        let q = self.quantization;
        let mut key = Vec::with_capacity(grid.n_interior());
        let mut rep = vec![0.0; grid.n_interior()];
        for k in 0..grid.n_interior() {
            let e = grid.eigenmode(k);
            // coefficient along the pivot-orthonormal mode
            let s = if hm1 { grid.eigenvalue(k).sqrt() } else { 1.0 };
            let c = h * e.values().iter().zip(x.values()).map(|(a, b)| a * b).sum::<f64>() * s;
            let kq = (c / q).round() as i64;
            key.push(kq);
            let cq = kq as f64 * q / s;
            for (r, ei) in rep.iter_mut().zip(e.values()) {
                *r += cq * ei;
            }
        }
        Ok((key, Field::from_vec_unchecked(grid, rep)))
    }
}

fn check_dissipative(model: &Model) -> Result<()> {
    let gap = model.dissipativity_gap().min(model.kappa_bound());
    if gap <= 0.0 {
        return Err(Error::DissipativityViolated { gap });
    }
    Ok(())
}

/// `(A, g0)` of a linear fast drift `A y + g0(x)`, `A = Lap + (c1 + F_g) I`.
fn linear_fast_parts(model: &Model) -> Result<(DMatrix<f64>, &XMap)> {
    if model.fast.c2 != 0.0 {
        return Err(Error::config("the linear oracle needs c2 = 0"));
    }
    let (f0, gain_y) = match &model.fast.g {
        CouplingSpec::Affine { f0, gain_y } => (f0, *gain_y),
        _ => return Err(Error::config("the linear oracle needs an affine fast forcing g")),
    };
    if !matches!(model.coupling, CouplingSpec::Affine { .. }) {
        return Err(Error::config("the linear oracle needs an affine slow forcing f"));
    }
    let n = model.n();
    let a = model.fast_grid.laplacian_matrix() + DMatrix::identity(n, n) * (model.fast.c1 + gain_y);
    Ok((a, f0))
}

/// Stationary mean `m(x) = -A^-1 g0(x)` of a linear frozen process.
pub fn stationary_mean(model: &Model, x: &Field) -> Result<Field> {
    let (a, g0) = linear_fast_parts(model)?;
    let rhs = DVector::from_iterator(x.len(), x.values().iter().map(|&v| -g0.eval(v)));
    let m = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("fast drift matrix".into()))?;
    Ok(Field::from_vec_unchecked(model.fast_grid, m.iter().copied().collect()))
}

/// Evaluates `fbar(x)`. With a `y`-independent forcing the integrand is constant in `z`
/// and `f(x, .)` is returned exactly, for every backend.
pub fn fbar(x: &Field, backend: &FbarBackend, model: &Model) -> Result<Field> {
    if !model.coupling.depends_on_y() {
        return coupling_f(&model.coupling, x, &Field::zeros(model.fast_grid));
    }
    check_dissipative(model)?;
    if backend.is_exact(model) || !backend.use_cache {
        return fbar_uncached(x, backend, model);
    }
    let (key, rep) = backend.quantize(model, x)?;
    if let Some(v) = backend.cache.read().ok().and_then(|c| c.get(&key).cloned()) {
        return Ok(v);
    }
    let v = fbar_uncached(&rep, backend, model)?;
    if let Ok(mut c) = backend.cache.write() {
        c.entry(key).or_insert_with(|| v.clone());
    }
    Ok(v)
}

/// Result of an ergodic average with its replica standard error per node.
#[derive(Clone, Debug, PartialEq)]
pub struct FbarEstimate {
    pub mean: Field,
    pub se: Vec<f64>,
    /// Norm of the standard-error field in the slow pivot norm.
    pub se_norm: f64,
}

fn fbar_uncached(x: &Field, backend: &FbarBackend, model: &Model) -> Result<Field> {
    match backend.mode {
        FbarMode::LinearOracle => {
            let m = stationary_mean(model, x)?;
            coupling_f(&model.coupling, x, &m)
        }
        FbarMode::ErgodicAverage { .. } => {
            let est = fbar_ergodic(x, backend, model)?;
            if est.se_norm > backend.tolerance {
                return Err(Error::NonConvergence {
                    se: est.se_norm,
                    tol: backend.tolerance,
                });
            }
            Ok(est.mean)
        }
    }
}

/// Time average of `f(x, Y_t)` over `[burn_in, horizon]` per replica, combined in
/// replica order. Replicas use fixed path indices, so the estimate is a deterministic
/// function of `x`.
pub fn fbar_ergodic(x: &Field, backend: &FbarBackend, model: &Model) -> Result<FbarEstimate> {
    let FbarMode::ErgodicAverage {
        burn_in,
        horizon,
        n_replicas,
        dt,
    } = backend.mode
    else {
        return Err(Error::config("fbar_ergodic needs the ergodic-average backend"));
    };
    let n = x.len();
    let n_steps = (horizon / dt).round() as usize;
    let first = (burn_in / dt).ceil() as usize;
    let y0 = Field::zeros(model.fast_grid);
    let means = par_map(n_replicas as u64, |r| {
        let driver = WienerDriver::new(
            backend.master_seed,
            REPLICA_PATH_BASE + r,
            model.slow_noise.n_modes(),
            model.fast_noise.n_modes(),
        );
        let mut acc = vec![0.0; n];
        let mut buf = vec![0.0; n];
        let mut count = 0usize;
        frozen_run(x, &y0, model, n_steps, dt, &driver, |k, y| {
            if k >= first {
                model.coupling.apply_into(x.values(), y, &mut buf);
                for (a, b) in acc.iter_mut().zip(&buf) {
                    *a += b;
                }
                count += 1;
            }
        })?;
        acc.iter_mut().for_each(|a| *a /= count as f64);
        Ok(acc)
    })?;
    let r = means.len() as f64;
    let mut mean = vec![0.0; n];
    for m in &means {
        for (a, b) in mean.iter_mut().zip(m) {
            *a += b / r;
        }
    }
    let mut se = vec![0.0; n];
    if means.len() > 1 {
        for m in &means {
            for ((s, b), a) in se.iter_mut().zip(m).zip(&mean) {
                *s += (b - a).powi(2);
            }
        }
        se.iter_mut().for_each(|s| *s = (*s / (r - 1.0) / r).sqrt());
    } else {
        se.iter_mut().for_each(|s| *s = f64::INFINITY);
    }
    let se_norm = if se.iter().all(|s| s.is_finite()) {
        norm_raw(x.grid(), &se, model.slow_h())?
    } else {
        f64::INFINITY
    };
    Ok(FbarEstimate {
        mean: Field::from_vec_unchecked(*x.grid(), mean),
        se,
        se_norm,
    })
}

/// Jacobian of `fbar` at `x` (row-major `n x n`): analytic for closed forms, forward
/// differences with step `1e-4 max(|x|, 1)` (bypassing the cache) for ergodic averages.
pub fn fbar_jacobian(x: &Field, backend: &FbarBackend, model: &Model) -> Result<DMatrix<f64>> {
    let n = x.len();
    let d_f0 = |v: f64| model.coupling.x_map().map_or(0.0, |m| m.derivative(v));
    if !model.coupling.depends_on_y() {
        return Ok(DMatrix::from_diagonal(&DVector::from_iterator(
            n,
            x.values().iter().map(|&v| d_f0(v)),
        )));
    }
    match backend.mode {
        FbarMode::LinearOracle => {
            let (a, g0) = linear_fast_parts(model)?;
            let gain = match model.coupling {
                CouplingSpec::Affine { gain_y, .. } => gain_y,
                _ => 0.0,
            };
            let dg = DMatrix::from_diagonal(&DVector::from_iterator(n, x.values().iter().map(|&v| g0.derivative(v))));
            let inv = a
                .try_inverse()
                .ok_or_else(|| Error::Singular("fast drift matrix".into()))?;
            let mut j = -(inv * dg) * gain;
            for i in 0..n {
                j[(i, i)] += d_f0(x.values()[i]);
            }
            Ok(j)
        }
        FbarMode::ErgodicAverage { .. } => {
            let plain = backend.clone().with_cache(false);
            let base = fbar(x, &plain, model)?;
            let step = 1e-4 * norm(x, model.slow_h())?.max(1.0);
            let mut j = DMatrix::zeros(n, n);
            for c in 0..n {
                let mut xp = x.values().to_vec();
                xp[c] += step;
                let fp = fbar(&Field::from_vec_unchecked(*x.grid(), xp), &plain, model)?;
                for r in 0..n {
                    j[(r, c)] = (fp.values()[r] - base.values()[r]) / step;
                }
            }
            Ok(j)
        }
    }
}

/// Reusable evaluator of `J_fbar(x)^T q` for adjoint sweeps.
pub struct FbarVjp<'a> {
    model: &'a Model,
    backend: &'a FbarBackend,
    kind: VjpKind,
}

enum VjpKind {
    Diagonal,
    Oracle { ainv: DMatrix<f64>, gain: f64 },
    Dense,
}

impl<'a> FbarVjp<'a> {
    pub fn new(model: &'a Model, backend: &'a FbarBackend) -> Result<Self> {
        let kind = if !model.coupling.depends_on_y() {
            VjpKind::Diagonal
        } else {
            match backend.mode {
                FbarMode::LinearOracle => {
                    let (a, _) = linear_fast_parts(model)?;
                    let ainv = a
                        .try_inverse()
                        .ok_or_else(|| Error::Singular("fast drift matrix".into()))?;
                    let gain = match model.coupling {
                        CouplingSpec::Affine { gain_y, .. } => gain_y,
                        _ => 0.0,
                    };
                    VjpKind::Oracle { ainv, gain }
                }
                FbarMode::ErgodicAverage { .. } => VjpKind::Dense,
            }
        };
        Ok(Self { model, backend, kind })
    }

    pub fn apply(&self, x: &[f64], q: &[f64], out: &mut [f64]) -> Result<()> {
        let d_f0 = |v: f64| self.model.coupling.x_map().map_or(0.0, |m| m.derivative(v));
        match &self.kind {
            VjpKind::Diagonal => {
                for ((o, &xi), &qi) in out.iter_mut().zip(x).zip(q) {
                    *o = d_f0(xi) * qi;
                }
            }
            VjpKind::Oracle { ainv, gain } => {
                let g0 = match &self.model.fast.g {
                    CouplingSpec::Affine { f0, .. } => f0,
                    _ => unreachable!("checked by linear_fast_parts"),
                };
                // J^T q = diag(f0') q - gain diag(g0') A^-T q
                let n = q.len();
                for (i, o) in out.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += ainv[(j, i)] * q[j];
                    }
                    *o = d_f0(x[i]) * q[i] - gain * g0.derivative(x[i]) * s;
                }
            }
            VjpKind::Dense => {
                let xf = Field::from_vec_unchecked(self.model.slow_grid, x.to_vec());
                let j = fbar_jacobian(&xf, self.backend, self.model)?;
                let r = j.transpose() * DVector::from_column_slice(q);
                out.copy_from_slice(r.as_slice());
            }
        }
        Ok(())
    }
}

/// Approximately stationary draws of the frozen process: one path from `y0 = 0`,
/// discarding `burn_in`, then recording every `thinning` steps.
pub fn sample_invariant(
    x: &Field,
    model: &Model,
    burn_in: f64,
    n_samples: usize,
    thinning: usize,
    dt: f64,
    driver: &WienerDriver,
) -> Result<Vec<Field>> {
    check_dissipative(model)?;
    let thinning = thinning.max(1);
    let first = (burn_in / dt).ceil() as usize;
    let n_steps = first + n_samples.saturating_sub(1) * thinning;
    let mut out = Vec::with_capacity(n_samples);
    let g = model.fast_grid;
    frozen_run(x, &Field::zeros(g), model, n_steps, dt, driver, |k, y| {
        if k >= first && (k - first) % thinning == 0 && out.len() < n_samples {
            out.push(Field::from_vec_unchecked(g, y.to_vec()));
        }
    })?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgodicityFit {
    pub rate_hat: f64,
    pub rate_se: f64,
    pub prefactor_hat: f64,
    pub r2: f64,
    pub n_points_fitted: usize,
    /// True when the signal reached the Monte Carlo floor before one e-fold.
    pub degenerate: bool,
    /// `(t, |E f(x, Y_t) - fbar(x)|, SE)`.
    pub curve: Vec<(f64, f64, f64)>,
}

/// Ordinary least squares `y = a + b t`; returns `(a, b, se_b, r2)`.
pub fn linear_fit(t: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
    let n = t.len() as f64;
    let mt = t.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = t.iter().map(|a| (a - mt).powi(2)).sum();
    let sxy: f64 = t.iter().zip(y).map(|(a, b)| (a - mt) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let b = sxy / sxx;
    let a = my - b * mt;
    let rss: f64 = t.iter().zip(y).map(|(x, v)| (v - a - b * x).powi(2)).sum();
    let se_b = if n > 2.0 { (rss / (n - 2.0) / sxx).sqrt() } else { f64::INFINITY };
    let r2 = if syy > 0.0 { 1.0 - rss / syy } else { 1.0 };
    (a, b, se_b, r2)
}

/// Monte Carlo decay of `|E f(x, Y_t^{x,y0}) - fbar(x)|` on `n_points` equally spaced
/// times in `[0, horizon]`, with a log-linear fit over the points above three standard
/// errors (stopping at the first point that falls below).
#[allow(clippy::too_many_arguments)]
pub fn ergodicity_decay(
    x: &Field,
    y0: &Field,
    model: &Model,
    fbar_x: &Field,
    horizon: f64,
    dt: f64,
    n_points: usize,
    n_paths: u64,
    driver: &WienerDriver,
) -> Result<ErgodicityFit> {
    check_dissipative(model)?;
    let n_steps = (horizon / dt).round() as usize;
    let stride = (n_steps / n_points.max(1)).max(1);
    let n = x.len();
    let per_path = par_map(n_paths, |p| {
        let d = driver.with_path(driver.path_index + p);
        let mut rec: Vec<Vec<f64>> = Vec::new();
        let mut buf = vec![0.0; n];
        frozen_run(x, y0, model, n_steps, dt, &d, |k, y| {
            if k % stride == 0 {
                model.coupling.apply_into(x.values(), y, &mut buf);
                rec.push(buf.clone());
            }
        })?;
        Ok(rec)
    })?;
    let n_t = per_path[0].len();
    let np = n_paths as f64;
    let mut curve = Vec::with_capacity(n_t);
    for ti in 0..n_t {
        let mut mean = vec![0.0; n];
        for rec in &per_path {
            for (m, v) in mean.iter_mut().zip(&rec[ti]) {
                *m += v / np;
            }
        }
        let mut var = vec![0.0; n];
        for rec in &per_path {
            for ((s, v), m) in var.iter_mut().zip(&rec[ti]).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let se: Vec<f64> = var.iter().map(|s| (s / (np - 1.0).max(1.0) / np).sqrt()).collect();
        let diff: Vec<f64> = mean.iter().zip(fbar_x.values()).map(|(a, b)| a - b).collect();
        let sig = norm_raw(x.grid(), &diff, model.slow_h())?;
        let se_n = norm_raw(x.grid(), &se, model.slow_h())?;
        curve.push(((ti * stride) as f64 * dt, sig, se_n));
    }
    let mut ts = Vec::new();
    let mut ls = Vec::new();
    for &(t, s, se) in &curve {
        if s <= 3.0 * se || s <= 0.0 {
            break;
        }
        ts.push(t);
        ls.push(s.ln());
    }
    let degenerate = ts.len() < 3 || (ls[0] - ls[ls.len() - 1]) < 1.0;
    let (a, b, se_b, r2) = if ts.len() >= 2 {
        linear_fit(&ts, &ls)
    } else {
        (f64::NAN, f64::NAN, f64::INFINITY, 0.0)
    };
    Ok(ErgodicityFit {
        rate_hat: -b,
        rate_se: se_b,
        prefactor_hat: a.exp(),
        r2,
        n_points_fitted: ts.len(),
        degenerate,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Grid;
    use crate::models::{FastOperatorSpec, NoiseSpec, SlowOperatorSpec};

    fn model(n: usize, c1: f64, gain_f: f64, fast_amps: Vec<f64>) -> Model {
        let g = Grid::dirichlet(n, 1.0).unwrap();
        Model::new(
            g,
            g,
            SlowOperatorSpec::LinearDiagnostic { a: 1.0 },
            CouplingSpec::Affine {
                f0: XMap::Affine { gain: -0.5, offset: 0.0 },
                gain_y: gain_f,
            },
            NoiseSpec::additive(vec![1.0]),
            FastOperatorSpec {
                c1,
                c2: 0.0,
                g: CouplingSpec::Affine {
                    f0: XMap::Sine { gain: 2.0 },
                    gain_y: 0.0,
                },
            },
            NoiseSpec::additive(fast_amps),
        )
        .unwrap()
    }

    fn ergodic(n_replicas: usize) -> FbarBackend {
        FbarBackend::new(
            FbarMode::ErgodicAverage {
                burn_in: 1.0,
                horizon: 21.0,
                n_replicas,
                dt: 2e-3,
            },
            42,
        )
        .unwrap()
    }

    #[test]
    fn ergodic_average_agrees_with_linear_oracle() {
        let m = model(4, 1.0, 1.0, vec![1.0, 0.5]);
        let x = Field::from_fn(m.slow_grid, |s| 1.0 + s);
        let exact = fbar(&x, &FbarBackend::linear_oracle(), &m).unwrap();
        let est = fbar_ergodic(&x, &ergodic(16), &m).unwrap();
        for i in 0..4 {
            let d = (est.mean.values()[i] - exact.values()[i]).abs();
            // Implicit Euler shifts the stationary mean by O(dt)
            assert!(d < 4.0 * est.se[i] + 1e-2 * exact.values()[i].abs(), "node {i}: {d} se {}", est.se[i]);
        }
    }

    #[test]
    fn y_independent_forcing_bypasses_backend() {
        let m = model(4, 1.0, 0.0, vec![1.0]);
        let x = Field::from_fn(m.slow_grid, |s| s);
        let v = fbar(&x, &ergodic(2), &m).unwrap();
        assert_eq!(v, x.scale(-0.5));
    }

    #[test]
    fn cache_returns_value_at_quantized_point() {
        let m = model(4, 1.0, 1.0, vec![1.0]);
        let b = ergodic(2);
        let x = Field::from_fn(m.slow_grid, |s| 0.3 + s);
        let a = fbar(&x, &b, &m).unwrap();
        let nudged = x.map(|v| v + 1e-6);
        let c = fbar(&nudged, &b, &m).unwrap();
        assert_eq!(a, c);
        assert_eq!(b.cache_len(), 1);
        let (_, rep) = b.quantize(&m, &x).unwrap();
        let direct = fbar(&rep, &b.clone().with_cache(false), &m).unwrap();
        assert_eq!(a, direct);
    }

    #[test]
    fn quantization_error_is_bounded() {
        let m = model(6, 1.0, 1.0, vec![1.0]);
        let b = FbarBackend::linear_oracle();
        let x = Field::from_fn(m.slow_grid, |s| (5.0 * s).sin());
        let (_, rep) = b.quantize(&m, &x).unwrap();
        let err = norm(&x.sub(&rep).unwrap(), m.slow_h()).unwrap();
        assert!(err <= 0.5 * b.quantization * 6f64.sqrt() + 1e-12);
    }

    #[test]
    fn non_dissipative_fast_is_rejected() {
        let m = model(4, 12.0, 1.0, vec![1.0]);
        let x = Field::zeros(m.slow_grid);
        assert!(matches!(
            fbar(&x, &FbarBackend::linear_oracle(), &m),
            Err(Error::DissipativityViolated { .. })
        ));
    }

    #[test]
    fn replica_tolerance_raises_non_convergence() {
        let m = model(4, 1.0, 1.0, vec![1.0]);
        let b = ergodic(3).with_tolerance(1e-9).with_cache(false);
        let r = fbar(&Field::zeros(m.slow_grid), &b, &m);
        assert!(matches!(r, Err(Error::NonConvergence { .. })));
    }

    #[test]
    fn oracle_jacobian_matches_central_differences() {
        let m = model(5, 1.0, 0.8, vec![1.0]);
        let b = FbarBackend::linear_oracle();
        let x = Field::from_fn(m.slow_grid, |s| 2.0 * s - 0.3);
        let j = fbar_jacobian(&x, &b, &m).unwrap();
        let h = 1e-6;
        for c in 0..5 {
            let mut p = x.values().to_vec();
            let mut q = p.clone();
            p[c] += h;
            q[c] -= h;
            let fp = fbar(&Field::new(m.slow_grid, p).unwrap(), &b, &m).unwrap();
            let fq = fbar(&Field::new(m.slow_grid, q).unwrap(), &b, &m).unwrap();
            for r in 0..5 {
                let fd = (fp.values()[r] - fq.values()[r]) / (2.0 * h);
                assert!((fd - j[(r, c)]).abs() < 1e-8, "({r},{c})");
            }
        }
    }

    #[test]
    fn ergodic_jacobian_is_close_to_oracle_jacobian() {
        let m = model(3, 1.0, 1.0, vec![0.5]);
        let x = Field::from_fn(m.slow_grid, |s| s);
        let je = fbar_jacobian(&x, &ergodic(2), &m).unwrap();
        let jo = fbar_jacobian(&x, &FbarBackend::linear_oracle(), &m).unwrap();
        // common random numbers: the noise cancels in the difference quotient
        assert!((je - &jo).norm() < 0.05 * jo.norm());
    }

    #[test]
    fn ou_decay_rate_is_recovered() {
        // one active mode: E f(x, Y_t) - fbar decays at lambda_1 - c1
        let m = model(2, 1.0, 1.0, vec![1.0]);
        let g = m.fast_grid;
        let rate = g.eigenvalue(0) - 1.0;
        let x = Field::zeros(m.slow_grid);
        let y0 = g.eigenmode(0).scale(3.0);
        let fb = fbar(&x, &FbarBackend::linear_oracle(), &m).unwrap();
        let d = WienerDriver::new(4, 0, 1, 1);
        let fit = ergodicity_decay(&x, &y0, &m, &fb, 1.0, 1e-3, 40, 2000, &d).unwrap();
        assert!(!fit.degenerate);
        assert!((fit.rate_hat / rate - 1.0).abs() < 0.1, "{} vs {rate}", fit.rate_hat);
    }

    #[test]
    fn linear_fit_recovers_line() {
        let t = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = t.iter().map(|v| 1.0 - 2.0 * v).collect();
        let (a, b, se, r2) = linear_fit(&t, &y);
        assert!((a - 1.0).abs() < 1e-12 && (b + 2.0).abs() < 1e-12 && se < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }
}
