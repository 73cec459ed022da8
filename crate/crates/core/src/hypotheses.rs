//! Sampling-based certification of the structural conditions on the slow and fast
//! coefficients. Every check evaluates an inequality on random and probe fields,
//! records the worst slack, and fits the smallest constant that would make the
//! sampled inequality hold.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::{inner, norm, Field, Grid, NormKind, Triple};
use crate::models::{coupling_f, coupling_g, fast_drift, slow_drift, slow_pair, Model, SlowOperatorSpec};

/// Relative tolerance applied to every sampled slack.
pub const REL_TOL: f64 = 1e-8;

/// Amplitudes swept by the random field sampler.
pub const AMPLITUDES: [f64; 3] = [0.1, 1.0, 10.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionId {
    A1Hemicontinuity,
    A2LocalMonotonicity,
    A3Coercivity,
    A4Growth,
    A5LipschitzF,
    A5LipschitzB1,
    H1Hemicontinuity,
    H2StrictMonotonicity,
    H2LipschitzB2,
    H3Coercivity,
    H4Growth,
    H4NoiseBound,
    LipschitzG,
    Dissipation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

/// Weight functions in the local monotonicity condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightForm {
    Zero,
    /// `|u|_V^(d(p-1)/2) |u|_H^((4-d)(p-1)/2)`.
    Interpolation { d: f64, p: f64 },
}

impl WeightForm {
    pub fn eval(&self, u: &Field, triple: &Triple) -> Result<f64> {
        match *self {
            WeightForm::Zero => Ok(0.0),
            WeightForm::Interpolation { d, p } => {
                let nv = norm(u, triple.v)?;
                let nh = norm(u, triple.h)?;
                Ok(nv.powf(d * (p - 1.0) / 2.0) * nh.powf((4.0 - d) * (p - 1.0) / 2.0))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlowHypothesisConstants {
    pub alpha1: f64,
    pub beta1: f64,
    pub eta1: f64,
    pub c: f64,
    pub rho_form: WeightForm,
    pub eta_form: WeightForm,
}

impl SlowHypothesisConstants {
    /// Exponents and weights dictated by the variant, with the given constant `c`.
    pub fn for_variant(spec: &SlowOperatorSpec, c: f64) -> Self {
        match *spec {
            SlowOperatorSpec::PorousMedium { r } => Self {
                alpha1: r + 1.0,
                beta1: 0.0,
                eta1: 2.0,
                c,
                rho_form: WeightForm::Zero,
                eta_form: WeightForm::Zero,
            },
            SlowOperatorSpec::CahnHilliard { .. } => {
                let w = WeightForm::Interpolation { d: 1.0, p: 3.0 };
                Self {
                    alpha1: 2.0,
                    beta1: 6.0,
                    eta1: 1.0,
                    c,
                    rho_form: w,
                    eta_form: w,
                }
            }
            SlowOperatorSpec::LinearDiagnostic { a } => Self {
                alpha1: 2.0,
                beta1: 0.0,
                eta1: 2.0 * a.abs(),
                c,
                rho_form: WeightForm::Zero,
                eta_form: WeightForm::Zero,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FastHypothesisConstants {
    pub alpha2: f64,
    pub beta2: f64,
    pub eta2: f64,
    pub kappa: f64,
    pub lambda: f64,
    pub c: f64,
    /// `2 lambda_1 - 2 L_g - L_B2^2`, computed from the model.
    pub gap: f64,
}

impl FastHypothesisConstants {
    /// Uses the model's certified rate as `kappa` and `lambda = kappa / 2`.
    pub fn for_model(model: &Model, c: f64) -> Self {
        let kappa = model.kappa_bound();
        Self {
            alpha2: 2.0,
            beta2: 4.0,
            eta2: 2.0,
            kappa,
            lambda: kappa / 2.0,
            c,
            gap: model.dissipativity_gap(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub condition_id: ConditionId,
    pub n_samples: usize,
    /// Slack of the worst sample (ranked by slack relative to the size of the terms).
    pub worst_margin: f64,
    pub worst_relative_margin: f64,
    pub tolerance: f64,
    /// Smallest constant for which every sample passes, where the check has one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fitted_constant: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub declared_constant: Option<f64>,
    pub witness: Option<Witness>,
    pub verdict: Verdict,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub lambda1: f64,
    pub lg: f64,
    pub lb2: f64,
    pub c1: f64,
    pub gap: f64,
    /// `gap - 2 c1`, the contraction rate actually guaranteed for the discrete drift.
    pub kappa_bound: f64,
    pub verdict: Verdict,
}

pub fn gap_report(model: &Model) -> GapReport {
    let gap = model.dissipativity_gap();
    let kappa_bound = model.kappa_bound();
    GapReport {
        lambda1: model.fast_grid.lambda_min(),
        lg: model.fast.lg(),
        lb2: model.fast_noise.lipschitz(),
        c1: model.fast.c1,
        gap,
        kappa_bound,
        verdict: if gap > 0.0 && kappa_bound > 0.0 {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub slow: Vec<CheckReport>,
    pub fast: Vec<CheckReport>,
    pub gap: GapReport,
    pub all_pass: bool,
}

/// Random fields with Gaussian eigenmode coefficients decaying like `1/k`,
/// plus deterministic scaled eigenmode probes.
pub struct FieldSampler {
    grid: Grid,
    modes: Vec<Field>,
    rng: ChaCha8Rng,
}

impl FieldSampler {
    pub fn new(grid: Grid, seed: u64, stream: u64) -> Self {
        let modes = (0..grid.n_interior()).map(|k| grid.eigenmode(k)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { grid, modes, rng }
    }

    pub fn random(&mut self, amplitude: f64) -> Field {
        let mut out = vec![0.0; self.grid.n_interior()];
        for (k, e) in self.modes.iter().enumerate() {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            let c = amplitude * z / (k + 1) as f64;
            for (o, ei) in out.iter_mut().zip(e.values()) {
                *o += c * ei;
            }
        }
        Field::from_vec_unchecked(self.grid, out)
    }

    /// `i`-th draw of the amplitude sweep.
    pub fn draw(&mut self, i: usize) -> Field {
        self.random(AMPLITUDES[i % AMPLITUDES.len()])
    }

    /// Scaled copies of the lowest, second and highest eigenmodes.
    pub fn probes(&self) -> Vec<Field> {
        let n = self.modes.len();
        let mut ks = vec![0, 1.min(n - 1), n - 1];
        ks.dedup();
        let mut out = Vec::new();
        for &a in &AMPLITUDES {
            for &k in &ks {
                out.push(self.modes[k].scale(a));
            }
        }
        out
    }
}

struct Sample {
    u: Field,
    v: Field,
    w: Field,
    /// Second fast point for two-point checks.
    z: Field,
}

/// Sample set: probe-vs-zero pairs, one identical pair, then random draws.
/// `u` lives on `grid_u`; `v`, `w`, `z` on `grid_v`.
fn samples(grid_u: Grid, grid_v: Grid, n: usize, seed: u64, stream: u64) -> Vec<Sample> {
    let mut su = FieldSampler::new(grid_u, seed, 4 * stream);
    let mut sv = FieldSampler::new(grid_v, seed, 4 * stream + 1);
    let mut sw = FieldSampler::new(grid_v, seed, 4 * stream + 2);
    let mut sz = FieldSampler::new(grid_v, seed, 4 * stream + 3);
    let mut out = Vec::with_capacity(n);
    let pu = su.probes();
    let pv = sv.probes();
    for (a, b) in pu.iter().zip(&pv) {
        if out.len() >= n {
            break;
        }
        out.push(Sample {
            u: a.clone(),
            v: b.clone(),
            w: Field::zeros(grid_v),
            z: Field::zeros(grid_v),
        });
    }
    if out.len() < n {
        let u = su.draw(1);
        let v = sv.draw(1);
        out.push(Sample {
            w: v.clone(),
            z: v.clone(),
            u,
            v,
        });
    }
    let mut i = 0;
    while out.len() < n {
        out.push(Sample {
            u: su.draw(i),
            v: sv.draw(i + 1),
            w: sw.draw(i + 2),
            z: sz.draw(i),
        });
        i += 1;
    }
    out
}

/// Two-point samples `(u, v)` vs `(u2, v2)`: slow points in `u`/`w`, fast points in `v`/`z`.
fn pair_samples(model: &Model, n: usize, seed: u64, stream: u64) -> Vec<Sample> {
    let gs = model.slow_grid;
    let gf = model.fast_grid;
    let mut a = FieldSampler::new(gs, seed, 4 * stream);
    let mut b = FieldSampler::new(gf, seed, 4 * stream + 1);
    let mut c = FieldSampler::new(gs, seed, 4 * stream + 2);
    let mut d = FieldSampler::new(gf, seed, 4 * stream + 3);
    let mut out = Vec::with_capacity(n);
    if n > 0 {
        let u = a.draw(1);
        let v = b.draw(1);
        out.push(Sample {
            w: u.clone(),
            z: v.clone(),
            u,
            v,
        });
    }
    for (p, q) in a.probes().into_iter().zip(b.probes()) {
        if out.len() >= n {
            break;
        }
        out.push(Sample {
            u: p,
            v: q,
            w: Field::zeros(gs),
            z: Field::zeros(gf),
        });
    }
    let mut i = 0;
    while out.len() < n {
        out.push(Sample {
            u: a.draw(i),
            v: b.draw(i + 1),
            w: c.draw(i + 2),
            z: d.draw(i),
        });
        i += 1;
    }
    out
}

struct Eval {
    slack: f64,
    scale: f64,
    fit: Option<f64>,
}

fn report(
    id: ConditionId,
    samples: &[Sample],
    declared: Option<f64>,
    witness_w: bool,
    mut eval: impl FnMut(usize, &Sample) -> Result<Eval>,
) -> Result<CheckReport> {
    let mut worst_rel = f64::INFINITY;
    let mut worst_abs = 0.0;
    let mut worst_idx = None;
    let mut fitted: Option<f64> = None;
    let mut ok = true;
    for (i, s) in samples.iter().enumerate() {
        let e = eval(i, s)?;
        let rel = if e.scale > 0.0 { e.slack / e.scale } else { e.slack };
        if e.slack < -REL_TOL * e.scale || !e.slack.is_finite() {
            ok = false;
        }
        if rel < worst_rel || worst_idx.is_none() {
            worst_rel = rel;
            worst_abs = e.slack;
            worst_idx = Some(i);
        }
        if let Some(f) = e.fit {
            fitted = Some(fitted.map_or(f, |g: f64| g.max(f)));
        }
    }
    let witness = worst_idx.map(|i| Witness {
        u: samples[i].u.values().to_vec(),
        v: samples[i].v.values().to_vec(),
        w: witness_w.then(|| samples[i].w.values().to_vec()),
    });
    Ok(CheckReport {
        condition_id: id,
        n_samples: samples.len(),
        worst_margin: worst_abs,
        worst_relative_margin: if worst_rel.is_finite() { worst_rel } else { 0.0 },
        tolerance: REL_TOL,
        fitted_constant: fitted,
        declared_constant: declared,
        witness,
        verdict: if ok { Verdict::Pass } else { Verdict::Fail },
    })
}

fn ratio_fit(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        (num / den).max(0.0)
    } else {
        0.0
    }
}

/// Largest jump of `f` between adjacent points of a uniform grid of `n` intervals on `[-1, 1]`.
fn max_jump(f: &mut impl FnMut(f64) -> Result<f64>, n: usize) -> Result<f64> {
    let mut prev = f(-1.0)?;
    let mut jump: f64 = 0.0;
    for i in 1..=n {
        let cur = f(-1.0 + 2.0 * i as f64 / n as f64)?;
        jump = jump.max((cur - prev).abs());
        prev = cur;
    }
    Ok(jump)
}

/// Continuity slack of a scalar map on `[-1, 1]`: a continuous map roughly halves
/// its largest adjacent jump under grid refinement, a jump discontinuity does not.
/// Returns `(0.75 J_n - J_2n, J_n)`.
pub fn hemicontinuity_slack(mut f: impl FnMut(f64) -> Result<f64>, n: usize) -> Result<(f64, f64)> {
    let jn = max_jump(&mut f, n)?;
    let j2n = max_jump(&mut f, 2 * n)?;
    Ok((0.75 * jn - j2n, jn))
}

const HEMI_INTERVALS: usize = 64;

pub fn check_hemicontinuity(model: &Model, n_samples: usize, seed: u64) -> Result<CheckReport> {
    let g = model.slow_grid;
    let s = samples(g, g, n_samples, seed, 1);
    let triple = model.slow_triple();
    report(ConditionId::A1Hemicontinuity, &s, None, true, |_, s| {
        let (slack, jn) = hemicontinuity_slack(
            |l| {
                let x = s.u.lincomb(1.0, &s.v, l)?;
                triple.pairing(&slow_drift(&model.slow, &x)?, &s.w)
            },
            HEMI_INTERVALS,
        )?;
        Ok(Eval {
            slack,
            scale: jn,
            fit: None,
        })
    })
}

/// `<A(u) - A(v), u - v> <= C (1 + rho(u) + eta(v)) |u - v|_H^2`.
pub fn check_local_monotonicity(
    model: &Model,
    consts: &SlowHypothesisConstants,
    n_samples: usize,
    seed: u64,
) -> Result<CheckReport> {
    let g = model.slow_grid;
    let s = samples(g, g, n_samples, seed, 2);
    let triple = model.slow_triple();
    report(ConditionId::A2LocalMonotonicity, &s, Some(consts.c), false, |_, s| {
        let d = s.u.sub(&s.v)?;
        let pair = slow_pair(&model.slow, &s.u, &d)? - slow_pair(&model.slow, &s.v, &d)?;
        let weight = 1.0 + consts.rho_form.eval(&s.u, &triple)? + consts.eta_form.eval(&s.v, &triple)?;
        let dn2 = norm(&d, triple.h)?.powi(2);
        let rhs = consts.c * weight * dn2;
        Ok(Eval {
            slack: rhs - pair,
            scale: rhs.abs() + pair.abs(),
            fit: Some(ratio_fit(pair, weight * dn2)),
        })
    })
}

/// `2 <A(u), u> + |B1(u)|^2 <= -eta1 |u|_V^alpha1 + C (1 + |u|_H^2)`.
pub fn check_coercivity(
    model: &Model,
    consts: &SlowHypothesisConstants,
    n_samples: usize,
    seed: u64,
) -> Result<CheckReport> {
    let g = model.slow_grid;
    let s = samples(g, g, n_samples, seed, 3);
    let triple = model.slow_triple();
    report(ConditionId::A3Coercivity, &s, Some(consts.c), false, |_, s| {
        let u = &s.u;
        let lhs = 2.0 * slow_pair(&model.slow, u, u)? + crate::models::noise_hs_norm_sq(&model.slow_noise, u)?;
        let v_term = consts.eta1 * norm(u, triple.v)?.powf(consts.alpha1);
        let base = 1.0 + norm(u, triple.h)?.powi(2);
        let slack = -v_term + consts.c * base - lhs;
        Ok(Eval {
            slack,
            scale: lhs.abs() + v_term + consts.c * base,
            fit: Some(ratio_fit(lhs + v_term, base)),
        })
    })
}

/// `|A(u)|_{V*}^(alpha1/(alpha1-1)) <= C (1 + |u|_V^alpha1) (1 + |u|_H^beta1)`.
pub fn check_growth(
    model: &Model,
    consts: &SlowHypothesisConstants,
    n_samples: usize,
    seed: u64,
) -> Result<CheckReport> {
    let g = model.slow_grid;
    let s = samples(g, g, n_samples, seed, 4);
    let triple = model.slow_triple();
    let q = consts.alpha1 / (consts.alpha1 - 1.0);
    report(ConditionId::A4Growth, &s, Some(consts.c), false, |_, s| {
        let u = &s.u;
        let lhs = triple.dual_norm(&slow_drift(&model.slow, u)?)?.powf(q);
        let base = (1.0 + norm(u, triple.v)?.powf(consts.alpha1))
            * (1.0 + norm(u, triple.h)?.powf(consts.beta1));
        Ok(Eval {
            slack: consts.c * base - lhs,
            scale: consts.c * base + lhs,
            fit: Some(ratio_fit(lhs, base)),
        })
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipschitzMap {
    F,
    B1,
    B2,
    G,
}

fn lip_eval(num: f64, den: f64, declared: f64) -> Eval {
    let bound = declared * den;
    Eval {
        slack: bound * (1.0 + REL_TOL) - num,
        scale: bound + num,
        fit: Some(ratio_fit(num, den)),
    }
}

/// Empirical Lipschitz ratio against the constant declared by the model. The first
/// sample is an identical pair, whose ratio is defined as 0.
pub fn check_lipschitz(model: &Model, map: LipschitzMap, n_samples: usize, seed: u64) -> Result<CheckReport> {
    let hs = model.slow_h();
    let l2 = NormKind::L2;
    let s = pair_samples(model, n_samples, seed, 10 + map as u64);
    match map {
        LipschitzMap::F => {
            let declared = model.f_lipschitz_x().max(model.f_lipschitz_y());
            report(ConditionId::A5LipschitzF, &s, Some(declared), true, |_, s| {
                let df = coupling_f(&model.coupling, &s.u, &s.v)?
                    .sub(&coupling_f(&model.coupling, &s.w, &s.z)?)?;
                let num = norm(&df, hs)?;
                let den = norm(&s.u.sub(&s.w)?, hs)? + norm(&s.v.sub(&s.z)?, l2)?;
                Ok(lip_eval(num, den, declared))
            })
        }
        LipschitzMap::B1 => {
            let declared = model.slow_noise.lipschitz();
            let amp = model.slow_noise.amplitude_sq_sum().sqrt();
            report(ConditionId::A5LipschitzB1, &s, Some(declared), true, |_, s| {
                let m1 = model.slow_noise.multiplier(&s.u)?;
                let m2 = model.slow_noise.multiplier(&s.w)?;
                let num = (m1 - m2).abs() * amp;
                Ok(lip_eval(num, norm(&s.u.sub(&s.w)?, hs)?, declared))
            })
        }
        LipschitzMap::B2 => {
            let declared = model.fast_noise.lipschitz();
            let amp = model.fast_noise.amplitude_sq_sum().sqrt();
            report(ConditionId::H2LipschitzB2, &s, Some(declared), true, |_, s| {
                let m1 = model.fast_noise.multiplier(&s.v)?;
                let m2 = model.fast_noise.multiplier(&s.z)?;
                let num = (m1 - m2).abs() * amp;
                Ok(lip_eval(num, norm(&s.v.sub(&s.z)?, l2)?, declared))
            })
        }
        LipschitzMap::G => {
            let cx = model.g_lipschitz_x();
            let lg = model.fast.lg();
            report(ConditionId::LipschitzG, &s, Some(lg), true, |_, s| {
                let g1 = coupling_g(&model.fast.g, &s.u, &s.v)?;
                let g2 = coupling_g(&model.fast.g, &s.w, &s.z)?;
                let num = norm(&g1.sub(&g2)?, l2)?;
                let bound = cx * norm(&s.u.sub(&s.w)?, hs)? + lg * norm(&s.v.sub(&s.z)?, l2)?;
                Ok(Eval {
                    slack: bound * (1.0 + REL_TOL) - num,
                    scale: bound + num,
                    fit: None,
                })
            })
        }
    }
}

fn fast_pair(model: &Model, u: &Field, v: &Field, w: &Field) -> Result<f64> {
    inner(&fast_drift(&model.fast, u, v)?, w, NormKind::L2)
}

fn fast_noise_hs_diff_sq(model: &Model, v1: &Field, v2: &Field) -> Result<f64> {
    let m1 = model.fast_noise.multiplier(v1)?;
    let m2 = model.fast_noise.multiplier(v2)?;
    Ok((m1 - m2).powi(2) * model.fast_noise.amplitude_sq_sum())
}

pub fn check_fast_hemicontinuity(model: &Model, n_samples: usize, seed: u64) -> Result<CheckReport> {
    let s = samples(model.slow_grid, model.fast_grid, n_samples, seed, 20);
    let mut du = FieldSampler::new(model.slow_grid, seed, 99);
    let shifts: Vec<Field> = (0..s.len()).map(|i| du.draw(i)).collect();
    report(ConditionId::H1Hemicontinuity, &s, None, true, |i, smp| {
        let (slack, jn) = hemicontinuity_slack(
            |l| {
                let u = smp.u.lincomb(1.0, &shifts[i], l)?;
                let v = smp.v.lincomb(1.0, &smp.z, l)?;
                fast_pair(model, &u, &v, &smp.w)
            },
            HEMI_INTERVALS,
        )?;
        Ok(Eval {
            slack,
            scale: jn,
            fit: None,
        })
    })
}

/// Fitted `kappa_hat = -max [2 <A2(u,v1) - A2(u,v2), v1 - v2> + |B2(v1) - B2(v2)|^2] / |v1 - v2|^2`.
pub fn check_fast_strict_monotonicity(
    model: &Model,
    consts: &FastHypothesisConstants,
    n_samples: usize,
    seed: u64,
) -> Result<CheckReport> {
    let s = samples(model.slow_grid, model.fast_grid, n_samples, seed, 21);
    let mut kappa_hat = f64::INFINITY;
    let mut rep = report(ConditionId::H2StrictMonotonicity, &s, Some(consts.kappa), true, |_, s| {
        let d = s.v.sub(&s.w)?;
        let dn2 = norm(&d, NormKind::L2)?.powi(2);
        let a = fast_drift(&model.fast, &s.u, &s.v)?.sub(&fast_drift(&model.fast, &s.u, &s.w)?)?;
        let lhs = 2.0 * inner(&a, &d, NormKind::L2)? + fast_noise_hs_diff_sq(model, &s.v, &s.w)?;
        if dn2 > 0.0 {
            kappa_hat = kappa_hat.min(-lhs / dn2);
        }
        let rhs = -consts.kappa * dn2;
        Ok(Eval {
            slack: rhs - lhs,
            scale: rhs.abs() + lhs.abs(),
            fit: None,
        })
    })?;
    rep.fitted_constant = kappa_hat.is_finite().then_some(kappa_hat);
    Ok(rep)
}

/// `2 <A2(u,v), v> <= C |v|_H^2 - eta2 |v|_V^alpha2 + C (1 + |u|_H1^2)`.
pub fn check_fast_coercivity(
    model: &Model,
    consts: &FastHypothesisConstants,
    n_samples: usize,
    seed: u64,
) -> Result<CheckReport> {
    let s = samples(model.slow_grid, model.fast_grid, n_samples, seed, 22);
    let ft = model.fast_triple();
    let hs = model.slow_h();
    report(ConditionId::H3Coercivity, &s, Some(consts.c), false, |_, s| {
        let lhs = 2.0 * fast_pair(model, &s.u, &s.v, &s.v)?;
        let v_term = consts.eta2 * norm(&s.v, ft.v)?.powf(consts.alpha2);
        let base = norm(&s.v, ft.h)?.powi(2) + 1.0 + norm(&s.u, hs)?.powi(2);
        Ok(Eval {
            slack: consts.c * base - v_term - lhs,
            scale: consts.c * base + v_term + lhs.abs(),
            fit: Some(ratio_fit(lhs + v_term, base)),
        })
    })
}

/// `|A2(u,v)|_{V*}^(alpha2/(alpha2-1)) <= C (1 + |v|_V^alpha2)(1 + |v|_H^beta2) + C |u|_H1^2`.
pub fn check_fast_growth(
    model: &Model,
    consts: &FastHypothesisConstants,
    n_samples: usize,
    seed: u64,
) -> Result<CheckReport> {
    let s = samples(model.slow_grid, model.fast_grid, n_samples, seed, 23);
    let ft = model.fast_triple();
    let hs = model.slow_h();
    let q = consts.alpha2 / (consts.alpha2 - 1.0);
    report(ConditionId::H4Growth, &s, Some(consts.c), false, |_, s| {
        let lhs = ft.dual_norm(&fast_drift(&model.fast, &s.u, &s.v)?)?.powf(q);
        let base = (1.0 + norm(&s.v, ft.v)?.powf(consts.alpha2)) * (1.0 + norm(&s.v, ft.h)?.powf(consts.beta2))
            + norm(&s.u, hs)?.powi(2);
        Ok(Eval {
            slack: consts.c * base - lhs,
            scale: consts.c * base + lhs,
            fit: Some(ratio_fit(lhs, base)),
        })
    })
}

/// `|B2(u, v)|_HS <= C (1 + |u|_H1)` uniformly in `v`.
pub fn check_noise_bound(
    model: &Model,
    consts: &FastHypothesisConstants,
    n_samples: usize,
    seed: u64,
) -> Result<CheckReport> {
    let s = samples(model.slow_grid, model.fast_grid, n_samples, seed, 24);
    let hs = model.slow_h();
    report(ConditionId::H4NoiseBound, &s, Some(consts.c), false, |_, s| {
        let lhs = crate::models::noise_hs_norm_sq(&model.fast_noise, &s.v)?.sqrt();
        let base = 1.0 + norm(&s.u, hs)?;
        Ok(Eval {
            slack: consts.c * base - lhs,
            scale: consts.c * base + lhs,
            fit: Some(ratio_fit(lhs, base)),
        })
    })
}

/// `2 <A2(u,v), v> <= -lambda |v|_H^2 + C (1 + |u|_H1^2)` with `0 < lambda < kappa`.
pub fn check_fast_dissipation(
    model: &Model,
    consts: &FastHypothesisConstants,
    n_samples: usize,
    seed: u64,
) -> Result<CheckReport> {
    let s = samples(model.slow_grid, model.fast_grid, n_samples, seed, 25);
    let hs = model.slow_h();
    let valid = consts.lambda > 0.0 && consts.lambda < consts.kappa;
    let mut rep = report(ConditionId::Dissipation, &s, Some(consts.c), false, |_, s| {
        let lhs = 2.0 * fast_pair(model, &s.u, &s.v, &s.v)?;
        let l_term = consts.lambda * norm(&s.v, NormKind::L2)?.powi(2);
        let base = 1.0 + norm(&s.u, hs)?.powi(2);
        Ok(Eval {
            slack: consts.c * base - l_term - lhs,
            scale: consts.c * base + l_term + lhs.abs(),
            fit: Some(ratio_fit(lhs + l_term, base)),
        })
    })?;
    if !valid {
        rep.verdict = Verdict::Fail;
    }
    Ok(rep)
}

/// Runs every slow and fast check with per-check sampler streams.
pub fn check_all(
    model: &Model,
    slow: &SlowHypothesisConstants,
    fast: &FastHypothesisConstants,
    n_samples: usize,
    seed: u64,
) -> Result<HypothesisReport> {
    let slow_reports = vec![
        check_hemicontinuity(model, n_samples, seed)?,
        check_local_monotonicity(model, slow, n_samples, seed)?,
        check_coercivity(model, slow, n_samples, seed)?,
        check_growth(model, slow, n_samples, seed)?,
        check_lipschitz(model, LipschitzMap::F, n_samples, seed)?,
        check_lipschitz(model, LipschitzMap::B1, n_samples, seed)?,
    ];
    let fast_reports = vec![
        check_fast_hemicontinuity(model, n_samples, seed)?,
        check_fast_strict_monotonicity(model, fast, n_samples, seed)?,
        check_lipschitz(model, LipschitzMap::B2, n_samples, seed)?,
        check_lipschitz(model, LipschitzMap::G, n_samples, seed)?,
        check_fast_coercivity(model, fast, n_samples, seed)?,
        check_fast_growth(model, fast, n_samples, seed)?,
        check_noise_bound(model, fast, n_samples, seed)?,
        check_fast_dissipation(model, fast, n_samples, seed)?,
    ];
    let gap = gap_report(model);
    let all_pass = slow_reports.iter().chain(&fast_reports).all(CheckReport::passed)
        && gap.verdict == Verdict::Pass;
    Ok(HypothesisReport {
        slow: slow_reports,
        fast: fast_reports,
        gap,
        all_pass,
    })
}
