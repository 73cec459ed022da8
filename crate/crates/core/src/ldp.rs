//! Monte Carlo experiments: time-increment and fast-auxiliary scalings, convergence
//! of the controlled system to the skeleton, moment bounds and rare-event tails.
//! Every path is a pure function of `(master_seed, path_index)`; results are reduced
//! sequentially in path order, so tables do not depend on the thread count.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::averaging::{linear_fit, FbarBackend};
use crate::error::{Error, Result};
use crate::field::{dot, norm_raw, Field};
use crate::models::{CouplingSpec, Dependence, Model, SlowOperatorSpec, XMap};
use crate::parallel::par_map;
use crate::paths::{auxiliary_run, Line, simulate_coupled, ScaleParams, TimeGrid, WienerDriver, FAST_STEP_RATIO};
use crate::skeleton::{solve_skeleton, Control};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub n_paths: u64,
    pub mean: f64,
    pub variance: f64,
    pub ci95: f64,
    pub hit_count: Option<u64>,
}

impl EnsembleStats {
    pub fn from_samples(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let variance = if v.len() > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            n_paths: v.len() as u64,
            mean,
            variance,
            ci95: 1.96 * (variance / n).sqrt(),
            hit_count: None,
        }
    }

    /// Bernoulli ensemble with `hits` successes.
    pub fn from_hits(hits: u64, n_paths: u64) -> Self {
        let p = hits as f64 / n_paths as f64;
        let variance = p * (1.0 - p);
        Self {
            n_paths,
            mean: p,
            variance,
            ci95: 1.96 * (variance / n_paths as f64).sqrt(),
            hit_count: Some(hits),
        }
    }

    pub fn se(&self) -> f64 {
        (self.variance / self.n_paths as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub param: f64,
    pub estimate: f64,
    pub se: f64,
    pub extra: Vec<f64>,
}

/// Weighted least-squares fit of `log estimate` against `log param`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub ci95: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub param_name: String,
    pub estimate_name: String,
    pub extra_names: Vec<String>,
    pub rows: Vec<ScalingRow>,
    pub fit: Option<SlopeFit>,
}

impl ScalingTable {
    pub fn new(param_name: &str, estimate_name: &str, extra_names: &[&str], rows: Vec<ScalingRow>) -> Result<Self> {
        let inc = rows.windows(2).all(|w| w[1].param > w[0].param);
        let dec = rows.windows(2).all(|w| w[1].param < w[0].param);
        if !(inc || dec) {
            return Err(Error::config(format!("{param_name} values must be strictly monotone")));
        }
        let fit = log_log_fit(&rows);
        Ok(Self {
            param_name: param_name.into(),
            estimate_name: estimate_name.into(),
            extra_names: extra_names.iter().map(|s| s.to_string()).collect(),
            rows,
            fit,
        })
    }

    pub fn slope_in(&self, lo: f64, hi: f64) -> bool {
        self.fit.as_ref().is_some_and(|f| f.slope >= lo && f.slope <= hi)
    }

    /// Consecutive rows (in table order) decrease by more than `k` combined SE.
    pub fn strictly_decreasing(&self, k: f64) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[0].estimate - w[1].estimate > k * (w[0].se.powi(2) + w[1].se.powi(2)).sqrt())
    }

    /// Consecutive rows never decrease by more than `k` combined SE, in order of `param`.
    pub fn nondecreasing_in_param(&self, k: f64) -> bool {
        let mut r = self.rows.clone();
        r.sort_by(|a, b| a.param.total_cmp(&b.param));
        r.windows(2)
            .all(|w| w[1].estimate - w[0].estimate >= -k * (w[0].se.powi(2) + w[1].se.powi(2)).sqrt())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{},se", self.param_name, self.estimate_name);
        for e in &self.extra_names {
            let _ = write!(s, ",{e}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:.16e},{:.16e},{:.16e}", r.param, r.estimate, r.se);
            for v in &r.extra {
                let _ = write!(s, ",{v:.16e}");
            }
            s.push('\n');
        }
        s
    }
}

fn log_log_fit(rows: &[ScalingRow]) -> Option<SlopeFit> {
    let pts: Vec<&ScalingRow> = rows.iter().filter(|r| r.estimate > 0.0 && r.param > 0.0).collect();
    if pts.len() < 2 {
        return None;
    }
    let x: Vec<f64> = pts.iter().map(|r| r.param.ln()).collect();
    let y: Vec<f64> = pts.iter().map(|r| r.estimate.ln()).collect();
    // delta method: var(log est) = (se / est)^2
    let weighted = pts.iter().all(|r| r.se > 0.0 && r.se.is_finite());
    if !weighted {
        let (a, b, se, _) = linear_fit(&x, &y);
        return Some(SlopeFit {
            slope: b,
            intercept: a,
            slope_se: se,
            ci95: (b - 1.96 * se, b + 1.96 * se),
        });
    }
    let w: Vec<f64> = pts.iter().map(|r| (r.estimate / r.se).powi(2)).collect();
    let sw: f64 = w.iter().sum();
    let mx = w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = w.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(&x).map(|(a, b)| a * (b - mx).powi(2)).sum();
    let sxy: f64 = w.iter().zip(&x).zip(&y).map(|((a, b), c)| a * (b - mx) * (c - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let se = (1.0 / sxx).sqrt();
    Some(SlopeFit {
        slope: b,
        intercept: a,
        slope_se: se,
        ci95: (b - 1.96 * se, b + 1.96 * se),
    })
}

/// Model, initial data, horizon and ensemble shared by the experiments.
#[derive(Clone, Debug)]
pub struct Setup {
    pub model: Model,
    pub x0: Field,
    pub y0: Field,
    pub t_end: f64,
    pub n_paths: u64,
    pub master_seed: u64,
}

impl Setup {
    pub fn driver(&self, path: u64) -> WienerDriver {
        WienerDriver::new(
            self.master_seed,
            path,
            self.model.slow_noise.n_modes(),
            self.model.fast_noise.n_modes(),
        )
    }

    /// Whether the fast line must be integrated.
    pub fn needs_fast(&self) -> bool {
        self.model.coupling.depends_on_y()
    }

    /// Largest step not above `cap` (and `delta/20` when the fast line runs) that
    /// divides `block`.
    pub fn step_for(&self, delta: f64, cap: f64, block: f64) -> f64 {
        let mut dt = cap;
        if self.needs_fast() {
            dt = dt.min(delta * FAST_STEP_RATIO);
        }
        block / (block / dt * (1.0 - 1e-12)).ceil()
    }
}

/// Constant-in-time control with row `phi` on the mesh of `grid`.
pub fn constant_control(grid: &TimeGrid, slow_dim: usize, fast_dim: usize, phi: &[f64]) -> Result<Control> {
    if phi.len() != slow_dim + fast_dim {
        return Err(Error::DimensionMismatch {
            expected: slow_dim + fast_dim,
            got: phi.len(),
        });
    }
    Ok(Control::from_fn(grid.n_steps(), grid.dt, slow_dim, fast_dim, |_, j| phi[j]))
}

fn h_dist_sq(model: &Model, a: &[f64], b: &[f64], buf: &mut Vec<f64>) -> Result<f64> {
    buf.clear();
    buf.extend(a.iter().zip(b).map(|(x, y)| x - y));
    Ok(norm_raw(&model.slow_grid, buf, model.slow_h())?.powi(2))
}

fn reduce_columns(per_path: &[Vec<f64>], k: usize) -> Vec<EnsembleStats> {
    (0..k)
        .map(|j| EnsembleStats::from_samples(&per_path.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect()
}

/// `E int_0^T |X_t - X_{t(zeta)}|_H^2 dt` for every `zeta`, all from the same paths.
pub fn validate_increments(
    setup: &Setup,
    scales: &ScaleParams,
    zetas: &[f64],
    dt_cap: f64,
    phi: Option<&[f64]>,
) -> Result<ScalingTable> {
    let m = &setup.model;
    let zmin = zetas.iter().copied().fold(f64::INFINITY, f64::min);
    let dt = setup.step_for(scales.delta, dt_cap, zmin);
    let grid = TimeGrid::new(setup.t_end, dt, zmin)?;
    let blocks: Vec<usize> = zetas
        .iter()
        .map(|&z| TimeGrid::new(setup.t_end, dt, z).map(|g| g.block_steps()))
        .collect::<Result<_>>()?;
    let control = match phi {
        Some(p) => Some(constant_control(&grid, m.slow_noise.n_modes(), m.fast_noise.n_modes(), p)?),
        None => None,
    };
    let n_steps = grid.n_steps();
    let per_path = par_map(setup.n_paths, |p| {
        let mut snaps: Vec<Vec<f64>> = vec![Vec::new(); blocks.len()];
        let mut acc = vec![0.0; blocks.len()];
        let mut buf = Vec::new();
        let mut err = None;
        simulate_coupled(m, scales, &grid, &setup.driver(p), &setup.x0, &setup.y0, control.as_ref(), true, |k, s| {
            if k == n_steps || err.is_some() {
                return;
            }
            for (j, &b) in blocks.iter().enumerate() {
                if k % b == 0 {
                    snaps[j] = s.x.values().to_vec();
                } else {
                    match h_dist_sq(m, s.x.values(), &snaps[j], &mut buf) {
                        Ok(d) => acc[j] += d * dt,
                        Err(e) => err = Some(e),
                    }
                }
            }
        })?;
        match err {
            Some(e) => Err(e),
            None => Ok(acc),
        }
    })?;
    let stats = reduce_columns(&per_path, zetas.len());
    let rows = zetas
        .iter()
        .zip(stats)
        .map(|(&z, s)| ScalingRow {
            param: z,
            estimate: s.mean,
            se: s.se(),
            extra: vec![],
        })
        .collect();
    ScalingTable::new("zeta", "mean_increment_sq", &[], rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxCell {
    pub zeta: f64,
    pub epsilon: f64,
    pub delta: f64,
}

/// `E int_0^T |Y_t - Yhat_t|^2 dt` per cell, with `Y` from the controlled system and
/// `Yhat` the auxiliary process on the same fast driver line.
pub fn validate_fast_auxiliary(setup: &Setup, cells: &[AuxCell], phi: &[f64]) -> Result<ScalingTable> {
    let m = &setup.model;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let scales = ScaleParams::new(cell.epsilon, cell.delta)?;
        let dt = cell.zeta / (cell.zeta / (cell.delta * FAST_STEP_RATIO) * (1.0 - 1e-12)).ceil();
        let grid = TimeGrid::new(setup.t_end, dt, cell.zeta)?;
        let control = constant_control(&grid, m.slow_noise.n_modes(), m.fast_noise.n_modes(), phi)?;
        let b = grid.block_steps();
        let n_steps = grid.n_steps();
        let vals = par_map(setup.n_paths, |p| {
            let d = setup.driver(p);
            let mut snaps = Vec::with_capacity(n_steps / b + 1);
            let mut ys: Vec<f64> = Vec::with_capacity((n_steps + 1) * m.n());
            simulate_coupled(m, &scales, &grid, &d, &setup.x0, &setup.y0, Some(&control), false, |k, s| {
                if k % b == 0 && k < n_steps {
                    snaps.push(s.x.clone());
                }
                ys.extend_from_slice(s.y.values());
            })?;
            let n = m.n();
            let h = m.fast_grid.spacing();
            let mut acc = 0.0;
            auxiliary_run(&snaps, &setup.y0, m, &scales, &grid, &d, |k, yh| {
                if k < n_steps {
                    let y = &ys[k * n..(k + 1) * n];
                    acc += h * y.iter().zip(yh).map(|(a, c)| (a - c).powi(2)).sum::<f64>() * dt;
                }
            })?;
            Ok(acc)
        })?;
        let s = EnsembleStats::from_samples(&vals);
        rows.push(ScalingRow {
            param: cell.zeta + cell.delta / cell.epsilon,
            estimate: s.mean,
            se: s.se(),
            extra: vec![cell.zeta, cell.delta / cell.epsilon, cell.epsilon, cell.delta],
        });
    }
    ScalingTable::new(
        "zeta_plus_delta_over_eps",
        "mean_fast_aux_sq",
        &["zeta", "delta_over_eps", "epsilon", "delta"],
        rows,
    )
}

/// `delta = epsilon^power`.
pub fn delta_rule(epsilon: f64, power: f64) -> f64 {
    epsilon.powf(power)
}

/// `E sup_t |X^{phi,eps}_t - Xbar^phi_t|_H^2` per `epsilon`, paths shared across `epsilon`.
pub fn validate_averaging(
    setup: &Setup,
    phi: &[f64],
    epsilons: &[f64],
    delta_power: f64,
    dt_cap: f64,
    backend: &FbarBackend,
) -> Result<ScalingTable> {
    let m = &setup.model;
    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let delta = delta_rule(eps, delta_power);
        let scales = ScaleParams::new(eps, delta)?;
        let dt = setup.step_for(delta, dt_cap, setup.t_end);
        let grid = TimeGrid::new(setup.t_end, dt, setup.t_end)?;
        let control = constant_control(&grid, m.slow_noise.n_modes(), m.fast_noise.n_modes(), phi)?;
        let sk = solve_skeleton(&setup.x0, &control, m, backend, &grid)?;
        let vals = par_map(setup.n_paths, |p| {
            let mut sup = 0.0f64;
            let mut buf = Vec::new();
            let mut err = None;
            simulate_coupled(m, &scales, &grid, &setup.driver(p), &setup.x0, &setup.y0, Some(&control), true, |k, s| {
                match h_dist_sq(m, s.x.values(), sk.states[k].values(), &mut buf) {
                    Ok(d) => sup = sup.max(d),
                    Err(e) => err = Some(e),
                }
            })?;
            match err {
                Some(e) => Err(e),
                None => Ok(sup),
            }
        })?;
        let s = EnsembleStats::from_samples(&vals);
        rows.push(ScalingRow {
            param: eps,
            estimate: s.mean,
            se: s.se(),
            extra: vec![delta, delta / eps, dt],
        });
    }
    ScalingTable::new("epsilon", "mean_sup_dist_sq", &["delta", "delta_over_eps", "dt"], rows)
}

/// `E sup_t |X_t|_H^2` per `epsilon` for the controlled system.
pub fn validate_moments(
    setup: &Setup,
    phi: &[f64],
    epsilons: &[f64],
    delta_power: f64,
    dt_cap: f64,
) -> Result<ScalingTable> {
    let m = &setup.model;
    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let delta = delta_rule(eps, delta_power);
        let scales = ScaleParams::new(eps, delta)?;
        let dt = setup.step_for(delta, dt_cap, setup.t_end);
        let grid = TimeGrid::new(setup.t_end, dt, setup.t_end)?;
        let control = constant_control(&grid, m.slow_noise.n_modes(), m.fast_noise.n_modes(), phi)?;
        let vals = par_map(setup.n_paths, |p| {
            let mut sup = 0.0f64;
            let mut err = None;
            simulate_coupled(m, &scales, &grid, &setup.driver(p), &setup.x0, &setup.y0, Some(&control), true, |_, s| {
                match norm_raw(&m.slow_grid, s.x.values(), m.slow_h()) {
                    Ok(v) => sup = sup.max(v * v),
                    Err(e) => err = Some(e),
                }
            })?;
            match err {
                Some(e) => Err(e),
                None => Ok(sup),
            }
        })?;
        let s = EnsembleStats::from_samples(&vals);
        rows.push(ScalingRow {
            param: eps,
            estimate: s.mean,
            se: s.se(),
            extra: vec![delta],
        });
    }
    ScalingTable::new("epsilon", "mean_sup_h_sq", &["delta"], rows)
}

/// No estimate exceeds the one at the largest `epsilon` by more than `k` combined SE.
pub fn moments_uniform(table: &ScalingTable, k: f64) -> bool {
    let Some(top) = table.rows.iter().max_by(|a, b| a.param.total_cmp(&b.param)) else {
        return true;
    };
    table
        .rows
        .iter()
        .all(|r| r.estimate - top.estimate <= k * (r.se.powi(2) + top.se.powi(2)).sqrt())
}

/// Tail event `<weights, X_T> >= threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailEvent {
    pub weights: Field,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub table: ScalingTable,
    /// `-I` used as reference, if supplied.
    pub reference: Option<f64>,
    /// `|eps log P - (-I)| / I` per row.
    pub discrepancy: Vec<f64>,
    /// Same with the Gaussian prefactor `eps log sqrt(4 pi I / eps)` added back.
    pub prefactor_corrected: Vec<f64>,
}

impl TailReport {
    pub fn discrepancy_decreasing(&self) -> bool {
        self.discrepancy.windows(2).all(|w| w[1] < w[0])
    }
}

/// Exact reduction of the tail functional to one slow eigenmode. When the weights are a
/// multiple `alpha e_k` of an eigenmode, the slow operator is linear and diagonal in the
/// eigenbasis, the forcing is affine in `x` and free of `y`, and the noise is additive,
/// the coefficient `c = <e_k, X>` solves the scalar equation
/// `dc = (-(a lambda_k - g) c + o_k) dt + sqrt(eps) b_k dW_k` on its own. The scheme below is
/// the projection of the full semi-implicit step, driven by the same normals.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeReduction {
    pub mode: usize,
    /// `alpha` with `weights = alpha e_k`.
    pub scale: f64,
    /// `a lambda_k`, treated implicitly.
    pub rate: f64,
    /// Pointwise forcing gain `g`.
    pub gain: f64,
    /// `offset <e_k, 1>`.
    pub forcing: f64,
    /// `b_k`, zero when mode `k` carries no noise.
    pub noise: f64,
    pub c0: f64,
    n_noise: usize,
}

impl ModeReduction {
    /// `None` when the model or the weights do not reduce.
    pub fn new(model: &Model, weights: &Field, x0: &Field) -> Option<Self> {
        let SlowOperatorSpec::LinearDiagnostic { a } = model.slow else {
            return None;
        };
        let CouplingSpec::Affine {
            f0: XMap::Affine { gain, offset },
            gain_y,
        } = model.coupling
        else {
            return None;
        };
        if gain_y != 0.0 || model.slow_noise.dependence != Dependence::Additive {
            return None;
        }
        let g = model.slow_grid;
        if weights.grid() != &g {
            return None;
        }
        let h = g.spacing();
        let wn = (h * weights.values().iter().map(|v| v * v).sum::<f64>()).sqrt();
        if wn == 0.0 {
            return None;
        }
        let (mode, e, alpha) = (0..g.n_interior())
            .map(|k| {
                let e = g.eigenmode(k);
                let al = h * dot(weights.values(), e.values());
                (k, e, al)
            })
            .max_by(|a, b| a.2.abs().total_cmp(&b.2.abs()))?;
        let resid = weights.values().iter().zip(e.values()).map(|(w, v)| (w - alpha * v).powi(2)).sum::<f64>();
        if (h * resid).sqrt() > 1e-10 * wn {
            return None;
        }
        let amps = &model.slow_noise.amplitudes;
        Some(Self {
            mode,
            scale: alpha,
            rate: a * g.eigenvalue(mode),
            gain,
            forcing: offset * h * e.values().iter().sum::<f64>(),
            noise: amps.get(mode).copied().unwrap_or(0.0),
            c0: h * dot(x0.values(), e.values()),
            n_noise: amps.len(),
        })
    }

    /// `<weights, X_T>` along one path.
    pub fn terminal(&self, epsilon: f64, grid: &TimeGrid, driver: &WienerDriver) -> f64 {
        let dt = grid.dt;
        let damp = 1.0 / (1.0 + dt * self.rate);
        let kick = (epsilon * dt).sqrt() * self.noise;
        let mut stream = driver.stream(Line::Slow);
        let mut xi = vec![0.0; self.n_noise];
        let mut c = self.c0;
        for step in 0..grid.n_steps() {
            stream.fill(step as u64, &mut xi);
            let z = xi.get(self.mode).copied().unwrap_or(0.0);
            c = (c + dt * (self.gain * c + self.forcing) + kick * z) * damp;
        }
        self.scale * c
    }
}

/// Plain Monte Carlo estimate of `eps log P(<w, X_T> >= r)` along `epsilons`
/// (in the given order, largest first), with common paths across `epsilon`.
pub fn estimate_tail(
    setup: &Setup,
    event: &TailEvent,
    epsilons: &[f64],
    delta_power: f64,
    dt: f64,
    rate: Option<f64>,
) -> Result<TailReport> {
    let m = &setup.model;
    if epsilons.len() > 64 {
        return Err(Error::config("at most 64 epsilon values per tail run"));
    }
    let grids: Vec<(ScaleParams, TimeGrid)> = epsilons
        .iter()
        .map(|&eps| {
            let delta = delta_rule(eps, delta_power);
            let step = setup.step_for(delta, dt, setup.t_end);
            Ok((ScaleParams::new(eps, delta)?, TimeGrid::new(setup.t_end, step, setup.t_end)?))
        })
        .collect::<Result<_>>()?;
    let h = event.weights.grid().spacing();
    let reduced = ModeReduction::new(m, &event.weights, &setup.x0);
    let masks = par_map(setup.n_paths, |p| {
        let d = setup.driver(p);
        let mut mask = 0u64;
        for (j, (sc, tg)) in grids.iter().enumerate() {
            let l = match &reduced {
                Some(r) => r.terminal(sc.epsilon, tg, &d),
                None => {
                    let end = simulate_coupled(m, sc, tg, &d, &setup.x0, &setup.y0, None, true, |_, _| {})?;
                    h * dot(event.weights.values(), end.x.values())
                }
            };
            if l >= event.threshold {
                mask |= 1 << j;
            }
        }
        Ok(mask)
    })?;
    let n = setup.n_paths;
    let mut rows = Vec::with_capacity(epsilons.len());
    let mut discrepancy = Vec::new();
    let mut corrected = Vec::new();
    for (j, &eps) in epsilons.iter().enumerate() {
        let hits = masks.iter().filter(|&&mk| mk & (1 << j) != 0).count() as u64;
        if j == 0 && hits < 10 {
            return Err(Error::InfeasibleEvent { hits, n_paths: n });
        }
        let st = EnsembleStats::from_hits(hits, n);
        let p = st.mean;
        let est = eps * p.ln();
        // delta method for eps log p
        let se = if hits > 0 { eps * ((1.0 - p) / (n as f64 * p)).sqrt() } else { f64::INFINITY };
        let (lo, hi) = (
            eps * (p - st.ci95).max(f64::MIN_POSITIVE).ln(),
            eps * (p + st.ci95).min(1.0).ln(),
        );
        let mut extra = vec![hits as f64, n as f64, p, lo, hi];
        if let Some(i) = rate {
            extra.push(-i);
            if i > 0.0 {
                discrepancy.push((est + i).abs() / i);
                let pre = eps * (4.0 * std::f64::consts::PI * i / eps).sqrt().ln();
                corrected.push((est + pre + i).abs() / i);
            }
        }
        rows.push(ScalingRow {
            param: eps,
            estimate: est,
            se,
            extra,
        });
    }
    let mut names = vec!["hits", "n_paths", "p_hat", "ci95_lo", "ci95_hi"];
    if rate.is_some() {
        names.push("minus_rate");
    }
    let mut table = ScalingTable::new("epsilon", "eps_log_p", &names, rows)?;
    // log-log slope is meaningless for negative estimates
    table.fit = None;
    Ok(TailReport {
        table,
        reference: rate.map(|i| -i),
        discrepancy,
        prefactor_corrected: corrected,
    })
}

/// Pivot-norm squared distance between two slow states.
pub fn slow_distance_sq(model: &Model, a: &Field, b: &Field) -> Result<f64> {
    let mut buf = Vec::new();
    h_dist_sq(model, a.values(), b.values(), &mut buf)
}
