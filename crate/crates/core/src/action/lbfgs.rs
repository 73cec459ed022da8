//! Limited-memory BFGS with a backtracking Armijo search whose trial points are
//! evaluated in parallel batches.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::parallel::par_map;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbfgsParams {
    pub memory: usize,
    pub max_iter: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Trial step sizes evaluated together in one batch.
    pub batch: usize,
    /// Relative objective change below which the run counts as stalled.
    pub ftol: f64,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iter: 500,
            armijo: 1e-4,
            max_backtracks: 40,
            batch: 4,
            ftol: 1e-15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted iterate, starting with the initial point.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn two_loop(g: &[f64], mem: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Minimizes `f` from `x0`. `fg` returns value and gradient, `f_only` the value.
/// Stops when `done(x, f, |g|)` holds, on stall, or after `max_iter` iterations.
pub fn minimize(
    x0: Vec<f64>,
    fg: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
    f_only: impl Fn(&[f64]) -> Result<f64> + Sync + Send,
    params: &LbfgsParams,
    done: impl Fn(&[f64], f64, f64) -> bool,
) -> Result<LbfgsOutcome> {
    let mut x = x0;
    let (mut f, mut g) = fg(&x)?;
    let mut gn = dot(&g, &g).sqrt();
    let mut history = vec![f];
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut stalled = 0;
    while iterations < params.max_iter && !done(&x, f, gn) {
        let mut d = two_loop(&g, &mem);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            mem.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -gn * gn;
        }
        // first iteration: unit step along a normalized direction
        let mut step = if mem.is_empty() { 1.0 / gn.max(1.0) } else { 1.0 };
        let mut accepted = None;
        let mut tried = 0;
        while accepted.is_none() && tried < params.max_backtracks {
            let b = params.batch.max(1).min(params.max_backtracks - tried);
            let steps: Vec<f64> = (0..b).map(|j| step * 0.5f64.powi(j as i32)).collect();
            let vals = par_map(b as u64, |j| {
                let a = steps[j as usize];
                let xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + a * di).collect();
                // infeasible trial points count as failed decrease
                Ok(f_only(&xt).unwrap_or(f64::INFINITY))
            })?;
            for (a, v) in steps.iter().zip(&vals) {
                if v.is_finite() && *v <= f + params.armijo * a * slope {
                    accepted = Some(*a);
                    break;
                }
            }
            tried += b;
            step *= 0.5f64.powi(b as i32);
        }
        let Some(a) = accepted else {
            break;
        };
        let xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + a * di).collect();
        let (fnew, gnew) = fg(&xn)?;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(p, q)| p - q).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(p, q)| p - q).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if mem.len() == params.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        iterations += 1;
        let rel = (f - fnew).abs() / f.abs().max(1e-300);
        stalled = if rel < params.ftol { stalled + 1 } else { 0 };
        x = xn;
        f = fnew;
        g = gnew;
        gn = dot(&g, &g).sqrt();
        history.push(f);
        if stalled >= 3 {
            break;
        }
    }
    let converged = done(&x, f, gn);
    Ok(LbfgsOutcome {
        x,
        f,
        grad_norm: gn,
        iterations,
        converged,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let fg = |x: &[f64]| {
            let g0 = -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]);
            let g1 = 200.0 * (x[1] - x[0] * x[0]);
            Ok((f(x), vec![g0, g1]))
        };
        let out = minimize(vec![-1.2, 1.0], fg, |x| Ok(f(x)), &LbfgsParams::default(), |_, _, g| g < 1e-10).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-8 && (out.x[1] - 1.0).abs() < 1e-8);
        assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn ill_conditioned_quadratic() {
        let w = [1.0, 1e3, 1e6];
        let f = move |x: &[f64]| 0.5 * x.iter().zip(w).map(|(v, c)| c * v * v).sum::<f64>();
        let fg = move |x: &[f64]| Ok((f(x), x.iter().zip(w).map(|(v, c)| c * v).collect()));
        let out = minimize(vec![1.0, 1.0, 1.0], fg, move |x| Ok(f(x)), &LbfgsParams::default(), |_, _, g| g < 1e-9).unwrap();
        assert!(out.converged, "{out:?}");
    }
}
