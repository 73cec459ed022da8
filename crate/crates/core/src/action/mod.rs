//! Minimum-action problems on the skeleton equation: the penalized objective
//! `1/2 int |phi|^2 dt + w * terminal_cost(X_T)`, its adjoint gradient and an
//! L-BFGS minimizer.

pub mod lbfgs;

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::averaging::{FbarBackend, FbarVjp};
use crate::error::{Error, Result};
use crate::field::{norm, solve_shifted, Field, NormKind};
use crate::models::Model;
use crate::parallel::par_map;
use crate::paths::{SlowStepper, TimeGrid};
use crate::skeleton::{solve_skeleton, Control, SkeletonTrajectory};

pub use lbfgs::LbfgsParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// `w |X_T - target|_H^2`.
    TerminalHit { target: Field, penalty_weight: f64 },
    /// Event `<weights, X_T> >= threshold` (L2 pairing), cost `w max(0, threshold - <weights, X_T>)^2`.
    TerminalFunctional {
        weights: Field,
        threshold: f64,
        penalty_weight: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlBlocks {
    SlowOnly,
    Both,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionProblem {
    pub x0: Field,
    pub grid: TimeGrid,
    pub objective: Objective,
    pub control_blocks: ControlBlocks,
}

impl ActionProblem {
    pub fn new(x0: Field, grid: TimeGrid, objective: Objective, control_blocks: ControlBlocks) -> Result<Self> {
        let (w, f) = match &objective {
            Objective::TerminalHit { target, penalty_weight } => (*penalty_weight, target),
            Objective::TerminalFunctional {
                weights,
                penalty_weight,
                threshold,
            } => {
                if !threshold.is_finite() {
                    return Err(Error::config("event threshold must be finite"));
                }
                (*penalty_weight, weights)
            }
        };
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::config(format!("penalty weight must be finite and nonnegative, got {w}")));
        }
        x0.grid().check_same(f.grid())?;
        Ok(Self {
            x0,
            grid,
            objective,
            control_blocks,
        })
    }

    pub fn penalty_weight(&self) -> f64 {
        match self.objective {
            Objective::TerminalHit { penalty_weight, .. } | Objective::TerminalFunctional { penalty_weight, .. } => {
                penalty_weight
            }
        }
    }

    pub fn with_penalty_weight(&self, w: f64) -> Self {
        let mut p = self.clone();
        match &mut p.objective {
            Objective::TerminalHit { penalty_weight, .. } | Objective::TerminalFunctional { penalty_weight, .. } => {
                *penalty_weight = w
            }
        }
        p
    }

    /// Distance of `x` to the target set (H-norm for hits, shortfall for events).
    pub fn terminal_gap(&self, x: &Field, model: &Model) -> Result<f64> {
        Ok(match &self.objective {
            Objective::TerminalHit { target, .. } => norm(&x.sub(target)?, model.slow_h())?,
            Objective::TerminalFunctional { weights, threshold, .. } => {
                (threshold - functional(weights, x)).max(0.0)
            }
        })
    }

    fn terminal_cost(&self, x: &Field, model: &Model) -> Result<f64> {
        Ok(self.penalty_weight() * self.terminal_gap(x, model)?.powi(2))
    }

    /// Euclidean gradient of the penalized terminal cost.
    fn terminal_gradient(&self, x: &Field, model: &Model) -> Result<Vec<f64>> {
        let w = self.penalty_weight();
        let g = model.slow_grid;
        let h = g.spacing();
        Ok(match &self.objective {
            Objective::TerminalHit { target, .. } => {
                let e: Vec<f64> = x.values().iter().zip(target.values()).map(|(a, b)| a - b).collect();
                let r = match model.slow_h() {
                    NormKind::L2 => e,
                    NormKind::Hm1Dual => solve_shifted(&g, 0.0, &e)?,
                    other => {
                        return Err(Error::JacobianUnavailable(format!("terminal cost in {other}")));
                    }
                };
                r.iter().map(|v| 2.0 * w * h * v).collect()
            }
            Objective::TerminalFunctional { weights, threshold, .. } => {
                let s = (threshold - functional(weights, x)).max(0.0);
                weights.values().iter().map(|v| -2.0 * w * s * h * v).collect()
            }
        })
    }
}

/// `<weights, x>` in the discrete L2 pairing.
pub fn functional(weights: &Field, x: &Field) -> f64 {
    weights.grid().spacing() * weights.values().iter().zip(x.values()).map(|(a, b)| a * b).sum::<f64>()
}

/// `1/2 sum_k |phi_k|^2 dt` over the steps of `grid`.
pub fn action_value(control: &Control, grid: &TimeGrid) -> f64 {
    let n = grid.n_steps().min(control.n_steps());
    let s: f64 = (0..n).map(|k| control.row(k).iter().map(|v| v * v).sum::<f64>()).sum();
    0.5 * s * control.dt
}

/// Penalized objective and the skeleton trajectory it was evaluated on.
pub fn objective(
    control: &Control,
    problem: &ActionProblem,
    model: &Model,
    backend: &FbarBackend,
) -> Result<(f64, SkeletonTrajectory)> {
    let tr = solve_skeleton(&problem.x0, control, model, backend, &problem.grid)?;
    let j = action_value(control, &problem.grid) + problem.terminal_cost(tr.terminal(), model)?;
    Ok((j, tr))
}

fn adjoint(
    control: &Control,
    problem: &ActionProblem,
    model: &Model,
    backend: &FbarBackend,
    tr: &SkeletonTrajectory,
) -> Result<Control> {
    let dt = problem.grid.dt;
    let n_steps = problem.grid.n_steps();
    let stepper = SlowStepper::new(model, dt, 0.0)?;
    let vjp = FbarVjp::new(model, backend)?;
    let g = model.slow_grid;
    let n = model.n();
    let m = control.slow_dim;
    let nonlinear = model.slow_explicit_has_jacobian();
    let mut grad = control.clone();
    grad.bound_m = None;
    for (gv, v) in grad.values_mut().iter_mut().zip(control.values()) {
        *gv = v * dt;
    }
    let mut p = problem.terminal_gradient(tr.terminal(), model)?;
    let mut q = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut bq = vec![0.0; m];
    for k in (0..n_steps).rev() {
        let x = tr.states[k].values();
        for (i, qi) in q.iter_mut().enumerate() {
            let mut s = 0.0;
            for (j, pj) in p.iter().enumerate() {
                s += stepper.inv[(j, i)] * pj;
            }
            *qi = s;
        }
        for (j, b) in bq.iter_mut().enumerate() {
            *b = (0..n).map(|i| stepper.basis[i * m + j] * q[i]).sum();
        }
        let mult = model.slow_noise.multiplier_raw(&g, x)?;
        let row = &mut grad.values_mut()[k * control.width()..k * control.width() + m];
        for (r, b) in row.iter_mut().zip(&bq) {
            *r += dt * mult * b;
        }
        let mut pn = q.clone();
        if nonlinear {
            model.slow_explicit_vjp(x, &q, &mut tmp);
            for (a, b) in pn.iter_mut().zip(&tmp) {
                *a += dt * b;
            }
        }
        vjp.apply(x, &q, &mut tmp)?;
        for (a, b) in pn.iter_mut().zip(&tmp) {
            *a += dt * b;
        }
        let phi_bq: f64 = control.slow(k).iter().zip(&bq).map(|(a, b)| a * b).sum();
        if phi_bq != 0.0 {
            let gm = model.slow_noise.multiplier_gradient(&g, x)?;
            for (a, b) in pn.iter_mut().zip(&gm) {
                *a += dt * phi_bq * b;
            }
        }
        p = pn;
    }
    Ok(grad)
}

/// Gradient of the penalized objective with respect to the control mesh values,
/// by a backward sweep of the discrete adjoint. Falls back to central differences
/// when a Jacobian is unavailable.
pub fn gradient(control: &Control, problem: &ActionProblem, model: &Model, backend: &FbarBackend) -> Result<Control> {
    let (_, tr) = objective(control, problem, model, backend)?;
    match adjoint(control, problem, model, backend, &tr) {
        Err(Error::JacobianUnavailable(why)) => {
            log::warn!("adjoint gradient unavailable ({why}); using finite differences");
            gradient_fd(control, problem, model, backend, FD_STEP)
        }
        r => r,
    }
}

/// Default step of the central-difference gradient.
pub const FD_STEP: f64 = 1e-5;

/// Central differences per control coordinate (two skeleton solves each).
pub fn gradient_fd(
    control: &Control,
    problem: &ActionProblem,
    model: &Model,
    backend: &FbarBackend,
    step: f64,
) -> Result<Control> {
    let len = control.values().len();
    let vals = par_map(len as u64, |i| {
        let i = i as usize;
        let mut cp = control.clone();
        cp.bound_m = None;
        let mut cm = cp.clone();
        cp.values_mut()[i] += step;
        cm.values_mut()[i] -= step;
        let (fp, _) = objective(&cp, problem, model, backend)?;
        let (fm, _) = objective(&cm, problem, model, backend)?;
        Ok((fp - fm) / (2.0 * step))
    })?;
    let mut g = control.clone();
    g.bound_m = None;
    g.values_mut().copy_from_slice(&vals);
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerParams {
    pub lbfgs: LbfgsParams,
    /// Bound on the L2-in-time gradient norm.
    pub gtol: f64,
    pub xtol: f64,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self {
            lbfgs: LbfgsParams::default(),
            gtol: 1e-7,
            xtol: f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionResult {
    pub control: Control,
    pub action_value: f64,
    pub trajectory: SkeletonTrajectory,
    pub terminal_gap: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub objective: f64,
    pub converged: bool,
    pub objective_history: Vec<f64>,
    pub gap_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSummary {
    pub action_value: f64,
    pub terminal_gap: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub objective: f64,
    pub converged: bool,
}

impl ActionResult {
    pub fn summary(&self) -> ActionSummary {
        ActionSummary {
            action_value: self.action_value,
            terminal_gap: self.terminal_gap,
            iterations: self.iterations,
            gradient_norm: self.gradient_norm,
            objective: self.objective,
            converged: self.converged,
        }
    }
}

/// Minimizes the penalized objective from `init` over the active control blocks.
/// The optimizer works in `u = phi sqrt(dt)`, in which the action is `|u|^2 / 2`
/// and the Euclidean gradient norm equals the L2-in-time gradient norm.
pub fn minimize(
    problem: &ActionProblem,
    init: &Control,
    model: &Model,
    backend: &FbarBackend,
    params: &OptimizerParams,
) -> Result<ActionResult> {
    init.check_dims(model)?;
    let dt = problem.grid.dt;
    let sq = dt.sqrt();
    let w = init.width();
    let n_steps = problem.grid.n_steps();
    let mut base = init.clone();
    base.bound_m = None;
    let active: Vec<usize> = (0..n_steps * w)
        .filter(|i| problem.control_blocks == ControlBlocks::Both || i % w < init.slow_dim)
        .collect();
    // the inactive fast block does not move the skeleton: zero it
    for i in 0..base.values().len() {
        if problem.control_blocks == ControlBlocks::SlowOnly && i % w >= init.slow_dim {
            base.values_mut()[i] = 0.0;
        }
    }
    let to_control = |u: &[f64]| {
        let mut c = base.clone();
        for (&i, v) in active.iter().zip(u) {
            c.values_mut()[i] = v / sq;
        }
        c
    };
    let u0: Vec<f64> = active.iter().map(|&i| base.values()[i] * sq).collect();
    let gaps = RefCell::new(Vec::new());
    let fg = |u: &[f64]| {
        let c = to_control(u);
        let (j, tr) = objective(&c, problem, model, backend)?;
        gaps.borrow_mut().push(problem.terminal_gap(tr.terminal(), model)?);
        let g = match adjoint(&c, problem, model, backend, &tr) {
            Err(Error::JacobianUnavailable(why)) => {
                log::warn!("adjoint gradient unavailable ({why}); using finite differences");
                gradient_fd(&c, problem, model, backend, FD_STEP)?
            }
            r => r?,
        };
        Ok((j, active.iter().map(|&i| g.values()[i] / sq).collect()))
    };
    let f_only = |u: &[f64]| objective(&to_control(u), problem, model, backend).map(|r| r.0);
    let done = |_: &[f64], _: f64, gn: f64| gn < params.gtol && gaps.borrow().last().is_some_and(|g| *g < params.xtol);
    let out = lbfgs::minimize(u0, fg, f_only, &params.lbfgs, done)?;
    let control = to_control(&out.x);
    let (j, trajectory) = objective(&control, problem, model, backend)?;
    let terminal_gap = problem.terminal_gap(trajectory.terminal(), model)?;
    Ok(ActionResult {
        action_value: action_value(&control, &problem.grid),
        control,
        trajectory,
        terminal_gap,
        iterations: out.iterations,
        gradient_norm: out.grad_norm,
        objective: j,
        converged: out.converged,
        objective_history: out.history,
        gap_history: gaps.into_inner(),
    })
}
