//! Subcommands and output files.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical failure,
//! 3 I/O failure, 4 order test failed (`theorem` only).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::curvlab::{convergence_order_study, OrderRow, OrderStudy};
use crate::distsim::{near_switch_fraction, simulate, CommConvention, RunSummary, SimOutput, StepRecord};
use crate::error::{Error, Result};
use crate::netcost::{default_profiles, project_table, ProjectionRow, TimingModel};
use crate::trigger::SyncPolicy;

pub const THREADS_ENV: &str = "CURVADION_THREADS";
pub const STEPS_HEADER: &str = "step,mean_loss,global_rmmc,synced,bytes_cum,divergence";
pub const ORDER_MIN_RATIO: f64 = 3.0;

#[derive(Debug, Parser)]
#[command(name = "curvadion", version, about = "Dion / CurvaDion data-parallel simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one policy and write steps.csv and summary.json.
    Run(RunArgs),
    /// Run the adaptive policy, then a scheduled policy at the same budget.
    Compare(RunArgs),
    /// Step-size halving study of the curvature relation.
    Theorem(RunArgs),
    /// Wall-clock projection over the network profiles.
    Project(ProjectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CommArg {
    Fullgrad,
    Lowrank,
}

#[derive(Debug, Args, Clone, Default)]
pub struct RunArgs {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Communication volume convention (overrides the config).
    #[arg(long, value_enum)]
    pub comm: Option<CommArg>,
    /// Evaluate worker gradients in parallel.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ProjectArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    pub compute_ms: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub opt_ms: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub flag_ms: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub sync_rate: Option<f64>,
}

/// Failure classes mapped onto process exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numerical(String),
    Io(String),
    OrderTest(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Io(_) => 3,
            Failure::OrderTest(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Numerical(m) | Failure::Io(m) | Failure::OrderTest(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config { .. } | Error::Precondition(_) | Error::StepSizeGuard { .. } => Failure::Config(msg),
            Error::Io { .. } => Failure::Io(msg),
            Error::NonFinite { .. } | Error::Matrix(_) => Failure::Numerical(msg),
        }
    }
}

pub fn run_cli(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Run(a) => Ok(cmd_run(&a).map(|_| ())?),
        Command::Compare(a) => Ok(cmd_compare(&a).map(|_| ())?),
        Command::Theorem(a) => {
            let study = cmd_theorem(&a)?;
            if !study.passes(ORDER_MIN_RATIO) {
                return Err(Failure::OrderTest(format!(
                    "step-halving ratios below {ORDER_MIN_RATIO}: {:?}",
                    study.ratios()
                )));
            }
            Ok(())
        }
        Command::Project(a) => Ok(cmd_project(&a).map(|_| ())?),
    }
}

/// Fully validated inputs of a simulation command.
pub struct Prepared {
    pub config: RunConfig,
    pub out: PathBuf,
    pub threads: Option<usize>,
}

pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::config(THREADS_ENV, format!("expected a positive integer, got {v:?}"))),
        },
    }
}

pub fn prepare(args: &RunArgs) -> Result<Prepared> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(c) = args.comm {
        config.comm = match c {
            CommArg::Fullgrad => CommConvention::Fullgrad,
            CommArg::Lowrank => CommConvention::Lowrank,
        };
    }
    if args.parallel {
        config.parallel = true;
    }
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&config.out));
    let threads = threads_from_env()?;
    Ok(Prepared {
        config,
        out,
        threads,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

pub fn steps_csv(records: &[StepRecord]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(STEPS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step, r.mean_loss, r.global_rmmc, r.synced as u8, r.bytes_cum, r.divergence
        );
    }
    s
}

fn write_run(dir: &Path, out: &SimOutput) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("steps.csv"), &steps_csv(&out.records))?;
    write_file(&dir.join("summary.json"), &to_json(&out.summary))
}

pub fn cmd_run(args: &RunArgs) -> Result<SimOutput> {
    let prep = prepare(args)?;
    let cfg = prep.config.sim_config(prep.threads)?;
    let problem = prep.config.build_problem()?;
    let out = simulate(problem.as_ref(), &cfg)?;
    write_run(&prep.out, &out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyReport {
    pub policy: SyncPolicy,
    pub final_loss: f64,
    pub mean_divergence: f64,
    pub final_divergence: f64,
    pub sync_count: u64,
    pub sync_rate: f64,
    pub total_bytes: u64,
    pub sync_steps: Vec<u64>,
}

impl From<&RunSummary> for PolicyReport {
    fn from(s: &RunSummary) -> Self {
        PolicyReport {
            policy: s.policy,
            final_loss: s.final_loss,
            mean_divergence: s.mean_divergence,
            final_divergence: s.final_divergence,
            sync_count: s.sync_count,
            sync_rate: s.sync_rate,
            total_bytes: s.total_bytes,
            sync_steps: s.sync_steps.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub seed: u64,
    pub steps: u64,
    pub n_workers: usize,
    pub scheduled_h: u64,
    pub h_derived: bool,
    pub h_clamped: bool,
    pub adaptive: PolicyReport,
    pub scheduled: PolicyReport,
    pub switch_steps: Vec<u64>,
    pub window: u64,
    pub near_switch_fraction: Option<f64>,
}

/// `round(1/rate)` clamped to `[1, steps]`; the flag reports clamping.
pub fn matched_interval(sync_count: u64, steps: u64) -> (u64, bool) {
    if sync_count <= 1 {
        return (steps, true);
    }
    let rate = sync_count as f64 / steps as f64;
    let h = (1.0 / rate).round() as u64;
    if h < 1 {
        (1, true)
    } else if h > steps {
        (steps, true)
    } else {
        (h, false)
    }
}

pub fn cmd_compare(args: &RunArgs) -> Result<Comparison> {
    let prep = prepare(args)?;
    let base = prep.config.sim_config(prep.threads)?;
    if !matches!(base.policy, SyncPolicy::Adaptive(_)) {
        return Err(Error::config("policy.kind", "compare needs an adaptive policy"));
    }
    if let Some(0) = prep.config.compare.h {
        return Err(Error::config("compare.h", "must be at least 1"));
    }
    let problem = prep.config.build_problem()?;
    let adaptive = simulate(problem.as_ref(), &base)?;

    let (h, derived, clamped) = match prep.config.compare.h {
        Some(h) => (h, false, false),
        None => {
            let (h, clamped) = matched_interval(adaptive.summary.sync_count, base.steps);
            if clamped {
                eprintln!(
                    "warning: adaptive run synced {} time(s) in {} steps; scheduled interval clamped to {h}",
                    adaptive.summary.sync_count, base.steps
                );
            }
            (h, true, clamped)
        }
    };
    let sched_cfg = crate::distsim::SimConfig {
        policy: SyncPolicy::Scheduled { h },
        ..base.clone()
    };
    let scheduled = simulate(problem.as_ref(), &sched_cfg)?;

    let window = prep.config.compare.window;
    let switches = problem.switch_steps().to_vec();
    let cmp = Comparison {
        seed: base.seed,
        steps: base.steps,
        n_workers: base.n_workers,
        scheduled_h: h,
        h_derived: derived,
        h_clamped: clamped,
        adaptive: PolicyReport::from(&adaptive.summary),
        scheduled: PolicyReport::from(&scheduled.summary),
        near_switch_fraction: near_switch_fraction(&adaptive.summary.sync_steps, &switches, window),
        switch_steps: switches,
        window,
    };
    write_run(&prep.out.join("adaptive"), &adaptive)?;
    write_run(&prep.out.join("scheduled"), &scheduled)?;
    write_file(&prep.out.join("comparison.json"), &to_json(&cmp))?;
    Ok(cmp)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct StudyReport<'a> {
    problem: String,
    mu: f64,
    steps: usize,
    burn_in: usize,
    min_ratio: f64,
    rows: &'a [OrderRow],
    all_not_applicable: bool,
    pass: bool,
}

pub fn cmd_theorem(args: &RunArgs) -> Result<OrderStudy> {
    let prep = prepare(args)?;
    let spec = &prep.config.theorem;
    let setup = spec.build()?;
    let study = convergence_order_study(&setup.problem, &setup.oracle, &setup.etas, &setup.template)?;

    let mut csv = String::from("eta,step,measured,predicted,residual\n");
    for (row, trace) in study.rows.iter().zip(&study.traces) {
        for p in trace {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                row.eta, p.step, p.measured_rmmc, p.predicted_rmmc, p.residual
            );
        }
    }
    let report = StudyReport {
        problem: format!("{:?}", spec.problem).to_lowercase(),
        mu: spec.mu,
        steps: spec.steps,
        burn_in: spec.burn_in,
        min_ratio: ORDER_MIN_RATIO,
        rows: &study.rows,
        all_not_applicable: study.all_not_applicable(),
        pass: study.passes(ORDER_MIN_RATIO),
    };
    create_dir(&prep.out)?;
    write_file(&prep.out.join("theorem_study.csv"), &csv)?;
    write_file(&prep.out.join("theorem_study.json"), &to_json(&report))?;
    Ok(study)
}

pub fn projection_csv(rows: &[ProjectionRow]) -> String {
    let mut s = String::from("network,t_sync_ms,baseline_ms,adaptive_ms,speedup\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.1},{:.1},{:.3}",
            r.network, r.t_sync_ms, r.baseline_ms, r.adaptive_ms, r.speedup
        );
    }
    s
}

pub fn cmd_project(args: &ProjectArgs) -> Result<Vec<ProjectionRow>> {
    let d = TimingModel::default();
    let tm = TimingModel {
        t_compute_ms: args.compute_ms.unwrap_or(d.t_compute_ms),
        t_opt_ms: args.opt_ms.unwrap_or(d.t_opt_ms),
        t_flag_ms: args.flag_ms.unwrap_or(d.t_flag_ms),
        sync_rate: args.sync_rate.unwrap_or(d.sync_rate),
        ..d
    };
    tm.validate()?;
    let rows = project_table(&default_profiles(), &tm)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    create_dir(&out)?;
    let csv = projection_csv(&rows);
    write_file(&out.join("projection.csv"), &csv)?;
    write_file(&out.join("projection.json"), &to_json(&rows))?;
    print!("{csv}");
    Ok(rows)
}
