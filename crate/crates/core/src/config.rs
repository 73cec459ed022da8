//! TOML run configuration, its validation and a canonical serialization for hashing.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::{ControlBlocks, LbfgsParams, Objective, OptimizerParams};
use crate::averaging::{FbarBackend, FbarMode, DEFAULT_QUANTIZATION};
use crate::error::{Error, Result};
use crate::field::{Bc, Field, Grid};
use crate::ldp::{AuxCell, Setup, TailEvent};
use crate::models::{CouplingSpec, FastOperatorSpec, Model, NoiseSpec, SlowOperatorSpec};
use crate::paths::{ScaleParams, TimeGrid, FAST_STEP_RATIO};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n_interior: usize,
    #[serde(default = "one")]
    pub length: f64,
    /// Boundary condition of the slow grid when the slow operator does not fix one.
    #[serde(default)]
    pub bc: Option<Bc>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub slow: SlowOperatorSpec,
    pub coupling: CouplingSpec,
    pub slow_noise: NoiseSpec,
    pub fast: FastOperatorSpec,
    pub fast_noise: NoiseSpec,
    #[serde(default)]
    pub stabilization: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalesConfig {
    pub epsilon: f64,
    /// Explicit delta; otherwise `delta = epsilon^delta_power`.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default = "two")]
    pub delta_power: f64,
    #[serde(default)]
    pub schedule: Vec<f64>,
}

fn two() -> f64 {
    2.0
}

impl ScalesConfig {
    pub fn delta_for(&self, eps: f64) -> f64 {
        match self.delta {
            Some(d) if eps == self.epsilon => d,
            _ => eps.powf(self.delta_power),
        }
    }

    pub fn params(&self) -> Result<ScaleParams> {
        ScaleParams::new(self.epsilon, self.delta_for(self.epsilon))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtRule {
    /// `dt` is used as given and must satisfy `dt <= delta/20` for every delta in use.
    Fixed,
    /// `dt` is a cap; each delta uses the largest admissible step dividing the horizon.
    FastScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZetaRule {
    SqrtDelta,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_end: f64,
    pub dt: f64,
    #[serde(default = "dt_rule_default")]
    pub dt_rule: DtRule,
    #[serde(default = "zeta_rule_default")]
    pub zeta_rule: ZetaRule,
    #[serde(default)]
    pub zeta: Option<f64>,
}

fn dt_rule_default() -> DtRule {
    DtRule::Fixed
}

fn zeta_rule_default() -> ZetaRule {
    ZetaRule::SqrtDelta
}

/// Initial data, targets and event weights on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Zero,
    Constant { value: f64 },
    /// `amplitude * e_mode` (L2-normalized eigenmode).
    Mode { mode: usize, amplitude: f64 },
    Values { values: Vec<f64> },
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec::Zero
    }
}

impl FieldSpec {
    pub fn build(&self, grid: Grid, what: &str) -> Result<Field> {
        match self {
            FieldSpec::Zero => Ok(Field::zeros(grid)),
            FieldSpec::Constant { value } => Ok(Field::constant(grid, *value)),
            FieldSpec::Mode { mode, amplitude } => {
                if *mode >= grid.n_interior() {
                    return Err(Error::config(format!("{what}.mode = {mode} exceeds the grid")));
                }
                Ok(grid.eigenmode(*mode).scale(*amplitude))
            }
            FieldSpec::Values { values } => {
                Field::new(grid, values.clone()).map_err(|e| Error::config(format!("{what}: {e}")))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    #[serde(default)]
    pub x0: FieldSpec,
    #[serde(default)]
    pub y0: FieldSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub master_seed: u64,
    pub n_paths: u64,
    #[serde(default)]
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "out_dir")]
    pub dir: String,
    #[serde(default = "formats")]
    pub formats: Vec<String>,
}

fn out_dir() -> String {
    "out".into()
}

fn formats() -> Vec<String> {
    vec!["csv".into(), "json".into()]
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: out_dir(),
            formats: formats(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesesConfig {
    pub c: f64,
    #[serde(default = "n_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn n_samples() -> usize {
    64
}

impl Default for HypothesesConfig {
    fn default() -> Self {
        Self {
            c: 5.0,
            n_samples: n_samples(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AveragingConfig {
    pub backend: FbarMode,
    #[serde(default = "quant")]
    pub quantization: f64,
    #[serde(default = "yes")]
    pub cache: bool,
    #[serde(default)]
    pub tolerance: Option<f64>,
}

fn quant() -> f64 {
    DEFAULT_QUANTIZATION
}

fn yes() -> bool {
    true
}

impl Default for AveragingConfig {
    fn default() -> Self {
        Self {
            backend: FbarMode::LinearOracle,
            quantization: quant(),
            cache: true,
            tolerance: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    /// Constant control row: slow block then fast block.
    pub phi: Vec<f64>,
    #[serde(default)]
    pub bound_m: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    TerminalHit {
        target: FieldSpec,
        penalty_weight: f64,
    },
    TerminalFunctional {
        weights: FieldSpec,
        threshold: f64,
        penalty_weight: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionConfig {
    pub objective: ObjectiveConfig,
    #[serde(default = "slow_only")]
    pub control_blocks: ControlBlocks,
    #[serde(default)]
    pub gtol: Option<f64>,
    #[serde(default)]
    pub xtol: Option<f64>,
    #[serde(default)]
    pub max_iter: Option<usize>,
}

fn slow_only() -> ControlBlocks {
    ControlBlocks::SlowOnly
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncrementsConfig {
    pub zetas: Vec<f64>,
    /// Control row for this experiment; uncontrolled when absent.
    #[serde(default)]
    pub phi: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FastAuxConfig {
    pub cells: Vec<AuxCell>,
    /// Control row for this experiment; `control.phi` when absent.
    #[serde(default)]
    pub phi: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErgodicityConfig {
    pub horizon: f64,
    pub dt: f64,
    #[serde(default = "n_points")]
    pub n_points: usize,
    pub n_paths: u64,
    #[serde(default)]
    pub x: FieldSpec,
    #[serde(default)]
    pub y0: FieldSpec,
}

fn n_points() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantConfig {
    pub burn_in: f64,
    pub n_samples: usize,
    pub thinning: usize,
    pub dt: f64,
    #[serde(default)]
    pub x: FieldSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailConfig {
    pub weights: FieldSpec,
    pub threshold: f64,
    /// Penalty weight of the minimum-action problem providing the reference rate.
    #[serde(default = "tail_penalty")]
    pub penalty_weight: f64,
}

fn tail_penalty() -> f64 {
    1e7
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentsConfig {
    #[serde(default)]
    pub increments: Option<IncrementsConfig>,
    #[serde(default)]
    pub fast_aux: Option<FastAuxConfig>,
    #[serde(default)]
    pub ergodicity: Option<ErgodicityConfig>,
    #[serde(default)]
    pub invariant: Option<InvariantConfig>,
    #[serde(default)]
    pub tail: Option<TailConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub scales: ScalesConfig,
    pub time: TimeConfig,
    pub run: RunSection,
    #[serde(default)]
    pub initial: Option<InitialConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub hypotheses: HypothesesConfig,
    #[serde(default)]
    pub averaging: AveragingConfig,
    #[serde(default)]
    pub control: Option<ControlConfig>,
    #[serde(default)]
    pub action: Option<ActionConfig>,
    #[serde(default)]
    pub experiments: ExperimentsConfig,
}

/// Hex SHA-256 of a config text.
pub fn hash_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// What a run is about to do; selects the validation rules that apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Check,
    Simulate,
    Average,
    Skeleton,
    Action,
    Increments,
    FastAux,
    Averaging,
    Ergodicity,
    Tail,
    Moments,
}

impl Purpose {
    fn averages(self) -> bool {
        !matches!(self, Purpose::Check | Purpose::Simulate | Purpose::Increments | Purpose::Moments)
    }

    fn is_ldp(self) -> bool {
        matches!(self, Purpose::Averaging | Purpose::Tail | Purpose::Moments | Purpose::FastAux)
    }

    fn uses_schedule(self) -> bool {
        matches!(self, Purpose::Averaging | Purpose::Tail | Purpose::Moments)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical TOML text: fields in declaration order, defaults made explicit.
    pub fn canonical(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> Result<String> {
        Ok(hash_text(&self.canonical()?))
    }

    pub fn slow_grid(&self) -> Result<Grid> {
        let bc = match self.model.slow.required_bc() {
            Some(b) => {
                if let Some(given) = self.grid.bc {
                    if given != b {
                        return Err(Error::config(format!(
                            "grid.bc = {given:?} conflicts with the slow operator, which needs {b:?}"
                        )));
                    }
                }
                b
            }
            None => self.grid.bc.unwrap_or(Bc::Dirichlet),
        };
        Grid::new(self.grid.n_interior, self.grid.length, bc)
    }

    pub fn model(&self) -> Result<Model> {
        let gs = self.slow_grid()?;
        let gf = Grid::dirichlet(self.grid.n_interior, self.grid.length)?;
        let m = Model::new(
            gs,
            gf,
            self.model.slow.clone(),
            self.model.coupling.clone(),
            self.model.slow_noise.clone(),
            self.model.fast.clone(),
            self.model.fast_noise.clone(),
        )?;
        Ok(match self.model.stabilization {
            Some(s) => m.with_stabilization(s),
            None => m,
        })
    }

    pub fn initial(&self, model: &Model) -> Result<(Field, Field)> {
        let init = self.initial.clone().unwrap_or(InitialConfig {
            x0: FieldSpec::Zero,
            y0: FieldSpec::Zero,
        });
        Ok((
            init.x0.build(model.slow_grid, "initial.x0")?,
            init.y0.build(model.fast_grid, "initial.y0")?,
        ))
    }

    /// Epsilon values of the schedule, or the single configured epsilon.
    pub fn epsilons(&self) -> Vec<f64> {
        if self.scales.schedule.is_empty() {
            vec![self.scales.epsilon]
        } else {
            self.scales.schedule.clone()
        }
    }

    /// Step for a given delta according to the dt rule.
    pub fn dt_for(&self, model: &Model, delta: f64) -> f64 {
        match self.time.dt_rule {
            DtRule::Fixed => self.time.dt,
            DtRule::FastScale => {
                let mut dt = self.time.dt;
                if model.coupling.depends_on_y() {
                    dt = dt.min(delta * FAST_STEP_RATIO);
                }
                let t = self.time.t_end;
                t / (t / dt * (1.0 - 1e-12)).ceil()
            }
        }
    }

    pub fn time_grid(&self, model: &Model) -> Result<TimeGrid> {
        let delta = self.scales.delta_for(self.scales.epsilon);
        let dt = self.dt_for(model, delta);
        match self.time.zeta_rule {
            ZetaRule::SqrtDelta => TimeGrid::with_sqrt_delta_zeta(self.time.t_end, dt, delta),
            ZetaRule::Fixed => {
                let z = self
                    .time
                    .zeta
                    .ok_or_else(|| Error::config("time.zeta is required with zeta_rule = \"fixed\""))?;
                TimeGrid::new(self.time.t_end, dt, z)
            }
        }
    }

    pub fn setup(&self, model: &Model) -> Result<Setup> {
        let (x0, y0) = self.initial(model)?;
        Ok(Setup {
            model: model.clone(),
            x0,
            y0,
            t_end: self.time.t_end,
            n_paths: self.run.n_paths,
            master_seed: self.run.master_seed,
        })
    }

    pub fn backend(&self) -> Result<FbarBackend> {
        let mut b = FbarBackend::new(self.averaging.backend.clone(), self.run.master_seed)?
            .with_quantization(self.averaging.quantization)
            .with_cache(self.averaging.cache);
        if let Some(t) = self.averaging.tolerance {
            b = b.with_tolerance(t);
        }
        Ok(b)
    }

    pub fn phi(&self, model: &Model) -> Result<Vec<f64>> {
        let w = model.slow_noise.n_modes() + model.fast_noise.n_modes();
        match &self.control {
            None => Ok(vec![0.0; w]),
            Some(c) if c.phi.len() == w => Ok(c.phi.clone()),
            Some(c) => Err(Error::config(format!(
                "control.phi has {} entries, the model has {w} noise modes (slow then fast)",
                c.phi.len()
            ))),
        }
    }

    pub fn objective(&self, model: &Model) -> Result<(Objective, ControlBlocks, OptimizerParams)> {
        let a = self
            .action
            .as_ref()
            .ok_or_else(|| Error::config("missing [action] section"))?;
        let obj = match &a.objective {
            ObjectiveConfig::TerminalHit { target, penalty_weight } => Objective::TerminalHit {
                target: target.build(model.slow_grid, "action.objective.target")?,
                penalty_weight: *penalty_weight,
            },
            ObjectiveConfig::TerminalFunctional {
                weights,
                threshold,
                penalty_weight,
            } => Objective::TerminalFunctional {
                weights: weights.build(model.slow_grid, "action.objective.weights")?,
                threshold: *threshold,
                penalty_weight: *penalty_weight,
            },
        };
        let mut p = OptimizerParams::default();
        if let Some(g) = a.gtol {
            p.gtol = g;
        }
        if let Some(x) = a.xtol {
            p.xtol = x;
        }
        if let Some(n) = a.max_iter {
            p.lbfgs = LbfgsParams {
                max_iter: n,
                ..p.lbfgs
            };
        }
        Ok((obj, a.control_blocks, p))
    }

    pub fn tail_event(&self, model: &Model) -> Result<TailEvent> {
        let t = self
            .experiments
            .tail
            .as_ref()
            .ok_or_else(|| Error::config("missing [experiments.tail] section"))?;
        Ok(TailEvent {
            weights: t.weights.build(model.slow_grid, "experiments.tail.weights")?,
            threshold: t.threshold,
        })
    }

    /// Checks the rules that apply to `purpose`; the message names the violated rule.
    pub fn validate(&self, purpose: Purpose) -> Result<Model> {
        let model = self.model()?;
        let t = &self.time;
        if !(t.t_end > 0.0 && t.dt > 0.0) {
            return Err(Error::config("time.t_end and time.dt must be positive"));
        }
        if self.run.n_paths == 0 {
            return Err(Error::config("run.n_paths must be positive"));
        }
        let eps_list: Vec<f64> = if purpose.uses_schedule() {
            self.epsilons()
        } else {
            vec![self.scales.epsilon]
        };
        for &eps in &eps_list {
            let delta = self.scales.delta_for(eps);
            ScaleParams::new(eps, delta)?;
            if purpose.is_ldp() && delta / eps >= 1.0 {
                return Err(Error::config(format!(
                    "scales: delta/epsilon = {} must be < 1 for large-deviation runs (epsilon = {eps})",
                    delta / eps
                )));
            }
            let fast_runs = model.coupling.depends_on_y() || matches!(purpose, Purpose::FastAux);
            if fast_runs && self.time.dt_rule == DtRule::Fixed {
                if t.dt > delta * FAST_STEP_RATIO * (1.0 + 1e-9) {
                    return Err(Error::config(format!(
                        "time.dt = {} violates the fast-scale rule dt <= delta/20 (delta = {delta}, epsilon = {eps})",
                        t.dt
                    )));
                }
            }
        }
        if purpose.averages() || purpose == Purpose::Check {
            let gap = model.dissipativity_gap().min(model.kappa_bound());
            if purpose.averages() && gap <= 0.0 {
                return Err(Error::DissipativityViolated { gap });
            }
        }
        if purpose != Purpose::Check {
            self.time_grid(&model)?;
            self.initial(&model)?;
            self.phi(&model)?;
        }
        match purpose {
            Purpose::Action | Purpose::Tail if self.action.is_none() && purpose == Purpose::Action => {
                return Err(Error::config("missing [action] section"));
            }
            Purpose::Increments if self.experiments.increments.is_none() => {
                return Err(Error::config("missing [experiments.increments] section"));
            }
            Purpose::FastAux if self.experiments.fast_aux.is_none() => {
                return Err(Error::config("missing [experiments.fast_aux] section"));
            }
            Purpose::Ergodicity if self.experiments.ergodicity.is_none() => {
                return Err(Error::config("missing [experiments.ergodicity] section"));
            }
            Purpose::Tail => {
                self.tail_event(&model)?;
            }
            Purpose::Averaging | Purpose::Moments if self.scales.schedule.len() < 2 => {
                return Err(Error::config("scales.schedule needs at least two epsilon values"));
            }
            _ => {}
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[grid]
n_interior = 8

[model.slow]
kind = "linear_diagnostic"
a = 1.0

[model.coupling]
kind = "affine"
gain_y = 1.0
f0 = { kind = "affine", gain = -0.5 }

[model.slow_noise]
amplitudes = [1.0, 0.5]
dependence = { kind = "additive" }

[model.fast]
c1 = 1.0
c2 = 0.0
g = { kind = "affine", gain_y = 0.5, f0 = { kind = "sine", gain = 1.0 } }

[model.fast_noise]
amplitudes = [1.0]
dependence = { kind = "additive" }

[scales]
epsilon = 0.1

[time]
t_end = 1.0
dt = 0.0005

[run]
master_seed = 7
n_paths = 100
"#;

    #[test]
    fn parses_and_hashes_stably() {
        let c = RunConfig::parse(BASE).unwrap();
        let m = c.validate(Purpose::Simulate).unwrap();
        assert_eq!(m.n(), 8);
        let again = RunConfig::parse(&c.canonical().unwrap()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash().unwrap(), c.hash().unwrap());
        let tg = c.time_grid(&m).unwrap();
        assert_eq!(tg.block_steps(), 200);
    }

    #[test]
    fn fast_rule_violation_is_named() {
        let c = RunConfig::parse(&BASE.replace("dt = 0.0005", "dt = 0.001")).unwrap();
        let e = c.validate(Purpose::Simulate).unwrap_err().to_string();
        assert!(e.contains("dt <= delta/20"), "{e}");
    }

    #[test]
    fn unknown_field_reports_location() {
        let e = RunConfig::parse(&BASE.replace("n_interior = 8", "n_interior = 8\nspacing = 2")).unwrap_err();
        let s = e.to_string();
        assert!(s.contains("spacing") && s.contains("line"), "{s}");
    }

    #[test]
    fn ldp_needs_small_regime() {
        let c = RunConfig::parse(&BASE.replace("epsilon = 0.1", "epsilon = 0.1\ndelta = 0.2\nschedule = [0.1, 0.05]")).unwrap();
        let e = c.validate(Purpose::Averaging).unwrap_err().to_string();
        assert!(e.contains("delta/epsilon"), "{e}");
    }
}
