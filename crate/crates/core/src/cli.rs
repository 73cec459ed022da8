//! Command-line front end: `mfw <subcommand> --config <path> [--seed N] [--out DIR]`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::action::{self, ActionProblem, ControlBlocks, Objective};
use crate::averaging::{self, FbarMode};
use crate::config::{Purpose, RunConfig};
use crate::error::{Error, Result};
use crate::hypotheses::{self, FastHypothesisConstants, SlowHypothesisConstants};
use crate::ldp::{self, EnsembleStats};
use crate::manifest::Manifest;
use crate::models::Model;
use crate::parallel::{par_map, threads_from_env, with_threads};
use crate::paths::{simulate_coupled, TimeGrid, WienerDriver};
use crate::skeleton::{energy_report, solve_skeleton, Control, EnvelopeConstants};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Halving-test window for the fast auxiliary estimate.
const HALVING_RANGE: (f64, f64) = (1.6, 2.6);
const INCREMENT_SLOPE_RANGE: (f64, f64) = (0.8, 1.2);
const TAIL_TOLERANCE: f64 = 0.25;

#[derive(Parser, Debug)]
#[command(name = "mfw", version, about = "Slow-fast SPDE simulation, averaging and large-deviation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `run.master_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Checks the slow and fast structural hypotheses.
    Check(Common),
    /// Simulates the coupled system and reports terminal statistics.
    Simulate(Common),
    /// Evaluates the averaged forcing at the initial state.
    Average(Common),
    /// Solves the skeleton equation under the configured constant control.
    Skeleton(Common),
    /// Minimizes the action for the configured objective.
    Action(Common),
    /// Runs a scaling experiment.
    Validate {
        #[command(subcommand)]
        target: Target,
    },
}

#[derive(Subcommand, Debug)]
pub enum Target {
    Increments(Common),
    FastAux(Common),
    Averaging(Common),
    Ergodicity(Common),
    LdpTail(Common),
    Moments(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, Purpose, &Common) {
        match self {
            Command::Check(c) => ("check", Purpose::Check, c),
            Command::Simulate(c) => ("simulate", Purpose::Simulate, c),
            Command::Average(c) => ("average", Purpose::Average, c),
            Command::Skeleton(c) => ("skeleton", Purpose::Skeleton, c),
            Command::Action(c) => ("action", Purpose::Action, c),
            Command::Validate { target } => match target {
                Target::Increments(c) => ("validate increments", Purpose::Increments, c),
                Target::FastAux(c) => ("validate fast-aux", Purpose::FastAux, c),
                Target::Averaging(c) => ("validate averaging", Purpose::Averaging, c),
                Target::Ergodicity(c) => ("validate ergodicity", Purpose::Ergodicity, c),
                Target::LdpTail(c) => ("validate ldp-tail", Purpose::Tail, c),
                Target::Moments(c) => ("validate moments", Purpose::Moments, c),
            },
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let (name, purpose, common) = cli.command.parts();
    let loaded = RunConfig::load(&common.config).and_then(|mut cfg| {
        if let Some(s) = common.seed {
            cfg.run.master_seed = s;
        }
        let model = cfg.validate(purpose)?;
        Ok((cfg, model))
    });
    let (cfg, model) = match loaded {
        Ok(v) => v,
        Err(e) => {
            eprintln!("mfw {name}: config error in {}: {e}", common.config.display());
            if let Some(dir) = &common.out {
                let mut m = Manifest::new(name, &common.config, String::new(), common.seed.unwrap_or(0), 0);
                m.errors.push(e.to_string());
                let _ = m.finish(dir);
            }
            return EXIT_CONFIG;
        }
    };
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    let threads = cfg.run.threads.or_else(threads_from_env).unwrap_or(0);
    let canonical = match cfg.canonical() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("mfw {name}: {e}");
            return EXIT_CONFIG;
        }
    };
    let hash = crate::config::hash_text(&canonical);
    let mut manifest = Manifest::new(name, &common.config, hash, cfg.run.master_seed, threads);
    let ctx = Ctx {
        cfg: &cfg,
        model: &model,
        out: &out,
    };
    let result = manifest
        .write_output(&out, "config.toml", &canonical)
        .and_then(|_| with_threads(threads, || dispatch(purpose, &ctx, &mut manifest))?);
    if let Err(e) = &result {
        eprintln!("mfw {name}: {e}");
        manifest.errors.push(e.to_string());
    }
    if let Err(e) = manifest.finish(&out) {
        eprintln!("mfw {name}: cannot write manifest: {e}");
        return EXIT_FAILED;
    }
    match result {
        Err(Error::Config(_)) | Err(Error::DualNormRequiresDirichlet) | Err(Error::GridMismatch(_)) => EXIT_CONFIG,
        Err(_) => EXIT_FAILED,
        Ok(()) if manifest.passed() => EXIT_OK,
        Ok(()) => {
            let failed: Vec<_> = manifest.checks.iter().filter(|(_, ok)| !**ok).map(|(k, _)| k.as_str()).collect();
            eprintln!("mfw {name}: failed checks: {}", failed.join(", "));
            EXIT_FAILED
        }
    }
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    model: &'a Model,
    out: &'a Path,
}

impl Ctx<'_> {
    fn wants(&self, format: &str) -> bool {
        self.cfg.output.formats.iter().any(|f| f == format)
    }

    fn csv(&self, m: &mut Manifest, name: &str, text: &str) -> Result<()> {
        if self.wants("csv") {
            m.write_output(self.out, name, text)?;
        }
        Ok(())
    }

    fn json(&self, m: &mut Manifest, name: &str, value: &impl serde::Serialize) -> Result<()> {
        if self.wants("json") {
            m.write_output(self.out, name, &serde_json::to_string_pretty(value)?)?;
        }
        Ok(())
    }
}

fn dispatch(purpose: Purpose, ctx: &Ctx, m: &mut Manifest) -> Result<()> {
    match purpose {
        Purpose::Check => cmd_check(ctx, m),
        Purpose::Simulate => cmd_simulate(ctx, m),
        Purpose::Average => cmd_average(ctx, m),
        Purpose::Skeleton => cmd_skeleton(ctx, m),
        Purpose::Action => cmd_action(ctx, m),
        Purpose::Increments => cmd_increments(ctx, m),
        Purpose::FastAux => cmd_fast_aux(ctx, m),
        Purpose::Averaging => cmd_averaging(ctx, m),
        Purpose::Ergodicity => cmd_ergodicity(ctx, m),
        Purpose::Tail => cmd_tail(ctx, m),
        Purpose::Moments => cmd_moments(ctx, m),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

fn cmd_check(ctx: &Ctx, m: &mut Manifest) -> Result<()> {
    let h = &ctx.cfg.hypotheses;
    let model = ctx.model;
    let slow = SlowHypothesisConstants::for_variant(&model.slow, h.c);
    let fast = FastHypothesisConstants::for_model(model, h.c);
    let rep = hypotheses::check_all(model, &slow, &fast, h.n_samples, h.seed)?;
    let mut csv = String::from("block,condition,verdict,worst_margin,worst_relative_margin,fitted_constant,declared_constant\n");
    for (block, list) in [("slow", &rep.slow), ("fast", &rep.fast)] {
        for r in list {
            let _ = writeln!(
                csv,
                "{block},{:?},{:?},{:.16e},{:.16e},{},{}",
                r.condition_id,
                r.verdict,
                r.worst_margin,
                r.worst_relative_margin,
                fmt_opt(r.fitted_constant),
                fmt_opt(r.declared_constant)
            );
            m.check(&format!("{block}:{:?}", r.condition_id), r.passed());
        }
    }
    m.check("dissipativity_gap", rep.gap.verdict == hypotheses::Verdict::Pass);
    m.record("gap", &rep.gap);
    ctx.csv(m, "hypotheses.csv", &csv)?;
    ctx.json(m, "hypotheses.json", &rep)?;
    Ok(())
}

fn control_for(ctx: &Ctx, grid: &TimeGrid) -> Result<Control> {
    let model = ctx.model;
    let phi = ctx.cfg.phi(model)?;
    let c = ldp::constant_control(grid, model.slow_noise.n_modes(), model.fast_noise.n_modes(), &phi)?;
    match ctx.cfg.control.as_ref().and_then(|c| c.bound_m) {
        Some(b) => c.with_bound(b),
        None => Ok(c),
    }
}

fn cmd_simulate(ctx: &Ctx, m: &mut Manifest) -> Result<()> {
    let cfg = ctx.cfg;
    let model = ctx.model;
    let scales = cfg.scales.params()?;
    let grid = cfg.time_grid(model)?;
    let (x0, y0) = cfg.initial(model)?;
    let control = match cfg.control {
        Some(_) => Some(control_for(ctx, &grid)?),
        None => None,
    };
    let b = grid.block_steps();
    let n = model.n();
    let sampled = par_map(cfg.run.n_paths, |p| {
        let d = WienerDriver::new(cfg.run.master_seed, p, model.slow_noise.n_modes(), model.fast_noise.n_modes());
        let mut path0 = Vec::new();
        let end = simulate_coupled(model, &scales, &grid, &d, &x0, &y0, control.as_ref(), true, |k, s| {
            if p == 0 && k % b == 0 {
                path0.push((s.t, s.x.values().to_vec()));
            }
        })?;
        Ok((end.x.into_values(), end.y.into_values(), path0))
    })?;
    let mut csv = String::from("index,node,mean_x,var_x,mean_y,var_y\n");
    for i in 0..n {
        let xs: Vec<f64> = sampled.iter().map(|s| s.0[i]).collect();
        let ys: Vec<f64> = sampled.iter().map(|s| s.1[i]).collect();
        let (sx, sy) = (EnsembleStats::from_samples(&xs), EnsembleStats::from_samples(&ys));
        let _ = writeln!(
            csv,
            "{i},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            model.slow_grid.node(i),
            sx.mean,
            sx.variance,
            sy.mean,
            sy.variance
        );
    }
    ctx.csv(m, "terminal.csv", &csv)?;
    let mut p0 = String::from("t");
    for i in 0..n {
        let _ = write!(p0, ",x_{i}");
    }
    p0.push('\n');
    for (t, x) in &sampled[0].2 {
        let _ = write!(p0, "{t:.16e}");
        for v in x {
            let _ = write!(p0, ",{v:.16e}");
        }
        p0.push('\n');
    }
    ctx.csv(m, "path0.csv", &p0)?;
    m.record("n_paths", cfg.run.n_paths);
    m.record("dt", grid.dt);
    m.record("zeta", grid.zeta);
    Ok(())
}

fn cmd_average(ctx: &Ctx, m: &mut Manifest) -> Result<()> {
    let model = ctx.model;
    let backend = ctx.cfg.backend()?;
    let (x0, _) = ctx.cfg.initial(model)?;
    let (mean, se) = match backend.mode {
        FbarMode::LinearOracle => (averaging::fbar(&x0, &backend, model)?, None),
        FbarMode::ErgodicAverage { .. } => {
            let est = averaging::fbar_ergodic(&x0, &backend, model)?;
            m.check("fbar_se_within_tolerance", est.se_norm <= backend.tolerance);
            m.record("se_norm", est.se_norm);
            (est.mean, Some(est.se))
        }
    };
    let mut csv = String::from("index,node,x,fbar,se\n");
    for i in 0..model.n() {
        let _ = writeln!(
            csv,
            "{i},{:.16e},{:.16e},{:.16e},{}",
            model.slow_grid.node(i),
            x0.values()[i],
            mean.values()[i],
            fmt_opt(se.as_ref().map(|s| s[i]))
        );
    }
    ctx.csv(m, "fbar.csv", &csv)?;
    Ok(())
}

fn skeleton_grid(ctx: &Ctx) -> Result<TimeGrid> {
    let t = ctx.cfg.time.t_end;
    TimeGrid::new(t, ctx.cfg.time.dt, t)
}

fn cmd_skeleton(ctx: &Ctx, m: &mut Manifest) -> Result<()> {
    let model = ctx.model;
    let grid = skeleton_grid(ctx)?;
    let (x0, _) = ctx.cfg.initial(model)?;
    let control = control_for(ctx, &grid)?;
    let traj = solve_skeleton(&x0, &control, model, &ctx.cfg.backend()?, &grid)?;
    let rep = energy_report(&traj, &EnvelopeConstants { c: ctx.cfg.hypotheses.c });
    m.check("energy_finite", rep.finite);
    m.check("energy_within_envelope", rep.within_envelope);
    ctx.csv(m, "skeleton.csv", &traj.to_csv())?;
    ctx.json(m, "energy.json", &rep)?;
    Ok(())
}

fn cmd_action(ctx: &Ctx, m: &mut Manifest) -> Result<()> {
    let model = ctx.model;
    let (obj, blocks, params) = ctx.cfg.objective(model)?;
    let grid = skeleton_grid(ctx)?;
    let (x0, _) = ctx.cfg.initial(model)?;
    let problem = ActionProblem::new(x0, grid, obj, blocks)?;
    let init = Control::for_model(model, &grid);
    let res = action::minimize(&problem, &init, model, &ctx.cfg.backend()?, &params)?;
    m.check("optimizer_converged", res.converged);
    m.record("action", res.summary());
    ctx.csv(m, "control.csv", &res.control.to_csv())?;
    ctx.csv(m, "trajectory.csv", &res.trajectory.to_csv())?;
    let mut hist = String::from("iteration,objective,terminal_gap\n");
    for (i, (f, g)) in res.objective_history.iter().zip(&res.gap_history).enumerate() {
        let _ = writeln!(hist, "{i},{f:.16e},{g:.16e}");
    }
    ctx.csv(m, "history.csv", &hist)?;
    ctx.json(m, "action.json", &res.summary())?;
    Ok(())
}

fn table_out(ctx: &Ctx, m: &mut Manifest, stem: &str, t: &ldp::ScalingTable) -> Result<()> {
    ctx.csv(m, &format!("{stem}.csv"), &t.to_csv())?;
    ctx.json(m, &format!("{stem}.json"), t)?;
    if let Some(f) = &t.fit {
        m.record("slope", f);
    }
    Ok(())
}

fn cmd_increments(ctx: &Ctx, m: &mut Manifest) -> Result<()> {
    let cfg = ctx.cfg;
    let setup = cfg.setup(ctx.model)?;
    let inc = cfg.experiments.increments.as_ref().expect("validated");
    let t = ldp::validate_increments(&setup, &cfg.scales.params()?, &inc.zetas, cfg.time.dt, inc.phi.as_deref())?;
    m.check("slope_in_range", t.slope_in(INCREMENT_SLOPE_RANGE.0, INCREMENT_SLOPE_RANGE.1));
    m.check("nondecreasing_in_zeta", t.nondecreasing_in_param(2.0));
    table_out(ctx, m, "increments", &t)
}

fn cmd_fast_aux(ctx: &Ctx, m: &mut Manifest) -> Result<()> {
    let cfg = ctx.cfg;
    let setup = cfg.setup(ctx.model)?;
    let fa = cfg.experiments.fast_aux.as_ref().expect("validated");
    let phi = match &fa.phi {
        Some(p) => p.clone(),
        None => cfg.phi(ctx.model)?,
    };
    let t = ldp::validate_fast_auxiliary(&setup, &fa.cells, &phi)?;
    for (i, w) in t.rows.windows(2).enumerate() {
        let ratio = w[0].estimate / w[1].estimate;
        m.record(&format!("halving_ratio_{i}"), ratio);
        m.check(&format!("halving_ratio_{i}"), ratio >= HALVING_RANGE.0 && ratio <= HALVING_RANGE.1);
    }
    table_out(ctx, m, "fast_aux", &t)
}

fn cmd_averaging(ctx: &Ctx, m: &mut Manifest) -> Result<()> {
    let cfg = ctx.cfg;
    let setup = cfg.setup(ctx.model)?;
    let t = ldp::validate_averaging(
        &setup,
        &cfg.phi(ctx.model)?,
        &cfg.epsilons(),
        cfg.scales.delta_power,
        cfg.time.dt,
        &cfg.backend()?,
    )?;
    m.check("strictly_decreasing", t.strictly_decreasing(2.0));
    table_out(ctx, m, "averaging", &t)
}

fn cmd_moments(ctx: &Ctx, m: &mut Manifest) -> Result<()> {
    let cfg = ctx.cfg;
    let setup = cfg.setup(ctx.model)?;
    let t = ldp::validate_moments(&setup, &cfg.phi(ctx.model)?, &cfg.epsilons(), cfg.scales.delta_power, cfg.time.dt)?;
    m.check("uniform_in_epsilon", ldp::moments_uniform(&t, 2.0));
    table_out(ctx, m, "moments", &t)
}

fn cmd_ergodicity(ctx: &Ctx, m: &mut Manifest) -> Result<()> {
    let cfg = ctx.cfg;
    let model = ctx.model;
    let e = cfg.experiments.ergodicity.as_ref().expect("validated");
    let x = e.x.build(model.slow_grid, "experiments.ergodicity.x")?;
    let y0 = e.y0.build(model.fast_grid, "experiments.ergodicity.y0")?;
    let fbar_x = averaging::fbar(&x, &cfg.backend()?, model)?;
    let d = WienerDriver::new(cfg.run.master_seed, 0, model.slow_noise.n_modes(), model.fast_noise.n_modes());
    let fit = averaging::ergodicity_decay(&x, &y0, model, &fbar_x, e.horizon, e.dt, e.n_points, e.n_paths, &d)?;
    let bound = model.kappa_bound() / 2.0;
    m.record("rate_hat", fit.rate_hat);
    m.record("rate_se", fit.rate_se);
    m.record("rate_lower_bound", bound);
    m.check("fit_not_degenerate", !fit.degenerate);
    m.check("rate_above_bound", fit.rate_hat >= bound - 2.0 * fit.rate_se);
    let mut csv = String::from("t,signal,se\n");
    for (t, s, se) in &fit.curve {
        let _ = writeln!(csv, "{t:.16e},{s:.16e},{se:.16e}");
    }
    ctx.csv(m, "ergodicity.csv", &csv)?;
    ctx.json(m, "ergodicity.json", &fit)?;
    if let Some(inv) = &cfg.experiments.invariant {
        let xi = inv.x.build(model.slow_grid, "experiments.invariant.x")?;
        let samples = averaging::sample_invariant(&xi, model, inv.burn_in, inv.n_samples, inv.thinning, inv.dt, &d)?;
        let mean_ref = averaging::stationary_mean(model, &xi).ok();
        let mut csv = String::from("index,node,sample_mean,se,stationary_mean\n");
        for i in 0..model.n() {
            let v: Vec<f64> = samples.iter().map(|s| s.values()[i]).collect();
            let st = EnsembleStats::from_samples(&v);
            let _ = writeln!(
                csv,
                "{i},{:.16e},{:.16e},{:.16e},{}",
                model.fast_grid.node(i),
                st.mean,
                st.se(),
                fmt_opt(mean_ref.as_ref().map(|f| f.values()[i]))
            );
        }
        ctx.csv(m, "invariant.csv", &csv)?;
    }
    Ok(())
}

fn cmd_tail(ctx: &Ctx, m: &mut Manifest) -> Result<()> {
    let cfg = ctx.cfg;
    let model = ctx.model;
    let event = cfg.tail_event(model)?;
    let tail = cfg.experiments.tail.as_ref().expect("validated");
    let setup = cfg.setup(model)?;
    let grid = skeleton_grid(ctx)?;
    let objective = Objective::TerminalFunctional {
        weights: event.weights.clone(),
        threshold: event.threshold,
        penalty_weight: tail.penalty_weight,
    };
    let problem = ActionProblem::new(setup.x0.clone(), grid, objective, ControlBlocks::SlowOnly)?;
    let params = cfg.objective(model).map(|o| o.2).unwrap_or_default();
    let res = action::minimize(&problem, &Control::for_model(model, &grid), model, &cfg.backend()?, &params)?;
    let rate = res.action_value;
    m.record("rate", rate);
    m.record("action", res.summary());
    let rep = ldp::estimate_tail(&setup, &event, &cfg.epsilons(), cfg.scales.delta_power, cfg.time.dt, Some(rate))?;
    m.check("discrepancy_decreasing", rep.discrepancy_decreasing());
    let last = rep.discrepancy.last().copied().unwrap_or(f64::INFINITY);
    m.record("final_discrepancy", last);
    m.record("prefactor_corrected", &rep.prefactor_corrected);
    m.check("final_discrepancy_within_tolerance", last < TAIL_TOLERANCE);
    ctx.csv(m, "ldp_tail.csv", &rep.table.to_csv())?;
    ctx.json(m, "ldp_tail.json", &rep)?;
    Ok(())
}
