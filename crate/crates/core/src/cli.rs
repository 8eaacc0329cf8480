//! The `rdsim` command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 capability refusal
//! (non-enumerable law, grid or budget cap), 4 I/O error, 5 validation
//! failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bounds::{lambda_m_search, monotone_fi_check, BoundReport, BoundsError, LambdaMEstimate, Method};
use crate::config::{ConfigError, ConfigFile, CONFIG_ENV};
use crate::distributions::{DistError, ServiceSpec};
use crate::model::{SlotInput, WorkloadState};
use crate::output;
use crate::seeding::cell_seed;
use crate::simulator::{
    arrival_statistics, drift_estimate, run, stability_verdict, sweep, validate_equivalence_with, SimError, DEFAULT_ORACLE_K_CAP,
    DEFAULT_ORACLE_SLOT_CAP,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CAPABILITY: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_VALIDATION: i32 = 5;

/// Slots per equivalence co-simulation during `validate`.
pub const VALIDATE_EQUIV_SLOTS: u64 = 100_000;
/// Slots of the balance run during `validate`.
pub const VALIDATE_BALANCE_SLOTS: u64 = 1_000_000;
pub const VALIDATE_ARRIVALS: u64 = 100_000;
pub const VALIDATE_DRIFT_STATES: usize = 20;
pub const VALIDATE_DRIFT_SAMPLES: u64 = 10_000;
pub const VALIDATE_DRIFT_MAX_SAMPLES: u64 = 1_000_000;
/// Drift probes multiply sampled states by this, so the linear drift term
/// dominates the O(E[B^2]) one even when lambda_lb is tight.
pub const VALIDATE_DRIFT_SCALE: u64 = 10;
pub const VALIDATE_MONOTONE_STATES: usize = 20;
/// Standard errors allowed before a statistical check fails.
pub const VALIDATE_Z: f64 = 3.0;

#[derive(Debug, Parser)]
#[command(name = "rdsim", version, about = "Redundancy-d load balancing: stability bounds and slot-level simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML config file; falls back to $RDSIM_CONFIG, then a built-in default.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Directory for CSV and JSON outputs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides `simulation.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `simulation.parallelism`.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Overlap probabilities, lambda_lb, the 1/g_d bound and optionally lambda_m.
    Bounds,
    /// One run at a single (d, lambda).
    Simulate,
    /// Stability sweep over the d and lambda lists.
    Sweep,
    /// Grid search for lambda_m.
    LambdaM,
    /// Recursion/oracle equivalence plus the statistical checks.
    Validate,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(EXIT_CONFIG, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(EXIT_IO, e.to_string())
    }
}

fn dist_code(e: &DistError) -> i32 {
    match e {
        DistError::NotSamplable | DistError::NotEnumerable | DistError::SupportTooLarge { .. } => EXIT_CAPABILITY,
        _ => EXIT_CONFIG,
    }
}

impl From<BoundsError> for CliError {
    fn from(e: BoundsError) -> Self {
        let code = match &e {
            BoundsError::GridTooLarge { .. } | BoundsError::NotEnumerable(_) => EXIT_CAPABILITY,
            BoundsError::Dist(d) => dist_code(d),
            _ => EXIT_CONFIG,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let code = match &e {
            SimError::ResourceCap { .. } | SimError::OracleCap { .. } => EXIT_CAPABILITY,
            SimError::Dist(d) => dist_code(d),
            SimError::Balance { .. } => EXIT_VALIDATION,
            _ => EXIT_CONFIG,
        };
        CliError::new(code, e.to_string())
    }
}

/// Parses the process arguments, runs, and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli, &mut lock) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("rdsim: {e}");
            e.code
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<ConfigFile, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    if let Some(s) = cli.seed {
        cfg.simulation.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.simulation.parallelism = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let dir = cli.out.as_deref();
    match cli.command {
        Command::Bounds => cmd_bounds(&cfg, dir, out),
        Command::Simulate => cmd_simulate(&cfg, dir, out),
        Command::Sweep => cmd_sweep(&cfg, dir, out),
        Command::LambdaM => cmd_lambda_m(&cfg, dir, out),
        Command::Validate => run_validate(&cfg, dir, out, |s, i| s.step(i).expect("generated inputs are valid")),
    }
}

/// The `validate` subcommand with `step` as the recursion under test.
/// Fails with [`EXIT_VALIDATION`] and the first failing check.
pub fn run_validate<F>(cfg: &ConfigFile, dir: Option<&Path>, out: &mut dyn Write, step: F) -> Result<(), CliError>
where
    F: Fn(&WorkloadState, &SlotInput) -> WorkloadState + Copy,
{
    let report = validate_config(cfg, step)?;
    writeln!(out, "{}", report.render())?;
    if let Some(d) = dir {
        output::write_file(d, "validate.json", &output::to_json(&report))?;
    }
    match report.first_failure() {
        None => Ok(()),
        Some(c) => Err(CliError::new(EXIT_VALIDATION, format!("validation failed: {} d={}: {}", c.name, c.d, c.detail))),
    }
}

fn pool(cfg: &ConfigFile) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.simulation.parallelism)
        .build()
        .map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))
}

/// Exact search, switching to Monte Carlo (with standard errors) when the
/// tuple law outgrows `bounds.support_cap`.
fn lambda_m(cfg: &ConfigFile, spec: &ServiceSpec, d: usize) -> Result<LambdaMEstimate, CliError> {
    let k = cfg.system.k;
    let cap = cfg.bounds.grid_cell_cap;
    match lambda_m_search(spec, k, d, cfg.method(), cap) {
        Err(BoundsError::Dist(DistError::SupportTooLarge { .. })) if spec.is_samplable() => {
            let mc = Method::MonteCarlo {
                samples: cfg.bounds.mc_samples,
                seed: cfg.simulation.seed,
            };
            Ok(lambda_m_search(spec, k, d, mc, cap)?)
        }
        other => Ok(other?),
    }
}

fn bound_reports(cfg: &ConfigFile, spec: &ServiceSpec) -> Result<Vec<BoundReport>, CliError> {
    cfg.ds()?
        .into_iter()
        .map(|d| BoundReport::build(spec, cfg.system.k, d).map_err(CliError::from))
        .collect()
}

fn cmd_bounds(cfg: &ConfigFile, dir: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = cfg.spec()?;
    let mut reports = bound_reports(cfg, &spec)?;
    if cfg.bounds.lambda_m {
        let pool = pool(cfg)?;
        for r in reports.iter_mut() {
            let est = pool.install(|| lambda_m(cfg, &spec, r.d))?;
            *r = r.clone().with_lambda_m(est);
        }
    }
    writeln!(out, "{}", output::to_json(&reports))?;
    if let Some(d) = dir {
        let seed = Some(cfg.simulation.seed);
        output::write_file(d, "bounds_report.json", &output::to_json(&reports))?;
        output::write_file(d, "bounds_report.csv", &output::report_csv(&reports, seed))?;
        output::write_file(d, "bounds.csv", &output::bounds_csv(&reports, seed))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SimulateSummary {
    #[serde(rename = "K")]
    k: usize,
    d: usize,
    lambda: f64,
    slots: u64,
    burn_in: u64,
    seed: u64,
    rng: String,
    mean_workload: f64,
    max_workload: u64,
    per_server_mean: Vec<f64>,
    jobs: u64,
    mean_sojourn: f64,
    slope: f64,
    verdict: String,
}

fn cmd_simulate(cfg: &ConfigFile, dir: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let (ds, ls) = (cfg.ds()?, cfg.lambdas()?);
    if ds.len() != 1 || ls.len() != 1 {
        return Err(CliError::new(EXIT_CONFIG, "simulate needs a single d and lambda; use `sweep` for lists"));
    }
    let rc = cfg.run_config(ds[0], ls[0])?;
    let trace = run(&rc)?;
    let v = stability_verdict(&trace, cfg.simulation.window_fraction, cfg.simulation.slope_tol)?;
    let s = &trace.summary;
    let summary = SimulateSummary {
        k: rc.k,
        d: rc.d,
        lambda: rc.lambda,
        slots: rc.slots,
        burn_in: rc.burn_in,
        seed: rc.seed,
        rng: trace.rng_algorithm.clone(),
        mean_workload: s.mean_workload,
        max_workload: s.max_workload,
        per_server_mean: s.per_server_mean.clone(),
        jobs: s.jobs,
        mean_sojourn: s.mean_sojourn,
        slope: v.slope,
        verdict: v.verdict.to_string(),
    };
    writeln!(out, "{}", output::to_json(&summary))?;
    if let Some(d) = dir {
        output::write_file(d, "summary.json", &output::to_json(&summary))?;
        output::write_file(d, "trace.csv", &output::trace_csv(&trace))?;
    }
    Ok(())
}

fn cmd_sweep(cfg: &ConfigFile, dir: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = cfg.spec()?;
    let ds = cfg.ds()?;
    let reports = bound_reports(cfg, &spec)?;
    let seed = Some(cfg.simulation.seed);
    if let Some(d) = dir {
        output::write_file(d, "bounds.csv", &output::bounds_csv(&reports, seed))?;
    }
    if !spec.is_samplable() {
        writeln!(out, "{} law cannot be sampled; wrote bounds only", spec.kind_name())?;
        writeln!(out, "{}", output::bounds_csv(&reports, seed).trim_end())?;
        return Ok(());
    }
    let ls = cfg.lambdas()?;
    let base = cfg.run_config(ds[0], ls[0])?;
    let result = sweep(&base, &ds, &ls, cfg.simulation.parallelism, &cfg.sweep_options())?;
    let csv = output::sweep_csv(&result);
    if let Some(d) = dir {
        output::write_file(d, "sweep.csv", &csv)?;
    }
    write!(out, "{csv}")?;
    for (d, r) in ds.iter().zip(&reports) {
        let edge = result.edge(*d).map_or_else(|| "none".to_string(), output::real);
        writeln!(out, "# d={d} edge={edge} lambda_lb={}", output::real(r.lambda_lb))?;
    }
    Ok(())
}

fn cmd_lambda_m(cfg: &ConfigFile, dir: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = cfg.spec()?;
    let pool = pool(cfg)?;
    let mut rows = Vec::new();
    for r in bound_reports(cfg, &spec)? {
        let est = pool.install(|| lambda_m(cfg, &spec, r.d))?;
        rows.push((r.d, r.lambda_lb, est));
    }
    let csv = output::lambda_m_csv(&rows, Some(cfg.simulation.seed));
    write!(out, "{csv}")?;
    if let Some(d) = dir {
        output::write_file(d, "lambda_m.csv", &csv)?;
        let ests: Vec<_> = rows.iter().map(|r| &r.2).collect();
        output::write_file(d, "lambda_m.json", &output::to_json(&ests))?;
    }
    Ok(())
}

/// Outcome of one validation check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub d: usize,
    /// `None` when the check does not apply to this config.
    pub passed: Option<bool>,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn first_failure(&self) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.passed == Some(false))
    }

    pub fn render(&self) -> String {
        self.checks
            .iter()
            .map(|c| {
                let tag = match c.passed {
                    Some(true) => "PASS",
                    Some(false) => "FAIL",
                    None => "SKIP",
                };
                format!("{tag} {} d={}: {}", c.name, c.d, c.detail)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn check(name: &str, d: usize, passed: Option<bool>, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        d,
        passed,
        detail: detail.into(),
    }
}

/// Runs every validation check for each `d` of the config, with `step` as
/// the recursion under test in the equivalence co-simulation.
pub fn validate_config<F>(cfg: &ConfigFile, step: F) -> Result<ValidationReport, CliError>
where
    F: Fn(&WorkloadState, &SlotInput) -> WorkloadState + Copy,
{
    let spec = cfg.spec()?;
    let k = cfg.system.k;
    let seed = cfg.simulation.seed;
    let mut checks = Vec::new();
    for (row, d) in cfg.ds()?.into_iter().enumerate() {
        let report = BoundReport::build(&spec, k, d)?;
        let lambda = match cfg.lambdas() {
            Ok(ls) => ls[0],
            Err(_) => (0.5 * report.best_bound).min(0.9),
        };
        let cell = |col: u64| cell_seed(seed, row as u64, col);

        if !spec.is_samplable() {
            checks.push(check("simulation", d, None, format!("{} law cannot be sampled", spec.kind_name())));
        } else {
            let mut rc = cfg.run_config(d, lambda)?;
            rc.slots = rc.slots.min(VALIDATE_EQUIV_SLOTS);
            rc.burn_in = rc.burn_in.min(rc.slots / 10);
            rc.seed = cell(0);
            if k > DEFAULT_ORACLE_K_CAP {
                checks.push(check("equivalence", d, None, format!("K = {k} above the oracle cap {DEFAULT_ORACLE_K_CAP}")));
            } else {
                let eq = validate_equivalence_with(&rc, DEFAULT_ORACLE_K_CAP, DEFAULT_ORACLE_SLOT_CAP, step)?;
                let detail = match &eq.divergence {
                    None => format!("{} slots, {} jobs, {} departures matched", eq.slots, eq.jobs, eq.departures_checked),
                    Some(div) => format!("divergence at {div}"),
                };
                checks.push(check("equivalence", d, Some(eq.passed()), detail));
            }

            let mut brc = cfg.run_config(d, lambda)?;
            brc.slots = brc.slots.min(VALIDATE_BALANCE_SLOTS);
            brc.burn_in = brc.burn_in.min(brc.slots / 10);
            brc.seed = cell(1);
            match run(&brc) {
                Ok(t) => checks.push(check(
                    "balance",
                    d,
                    Some(true),
                    format!("{} slots, top-{d} workloads equal throughout (max {})", t.slots, t.summary.max_workload),
                )),
                Err(SimError::Balance { slot, workloads }) => {
                    checks.push(check("balance", d, Some(false), format!("slot {slot}: {workloads:?}")))
                }
                Err(e) => return Err(e.into()),
            }

            let mut arc = cfg.run_config(d, lambda)?;
            arc.seed = cell(2);
            let stats = arrival_statistics(&arc, VALIDATE_ARRIVALS)?;
            let detail = match stats.overlap_outlier(VALIDATE_Z) {
                None => format!("{} arrivals, overlap counts {:?}", stats.arrivals, stats.overlap_counts),
                Some(m) => format!(
                    "m = {m}: observed {} vs expected {:.1}",
                    stats.overlap_counts[m], stats.overlap_expected[m]
                ),
            };
            checks.push(check("overlap_frequency", d, Some(stats.overlap_outlier(VALIDATE_Z).is_none()), detail));
            let detail = match stats.rank_violation(VALIDATE_Z) {
                None => format!("ranked mean work {:?}", stats.ranked_mean.iter().map(|x| (x * 1e3).round() / 1e3).collect::<Vec<_>>()),
                Some(r) => format!(
                    "rank {r} receives more than rank {}: diff {:.4} (se {:.4})",
                    r + 1,
                    stats.ranked_diff_mean[r],
                    stats.ranked_diff_se[r]
                ),
            };
            checks.push(check("ranked_work", d, Some(stats.rank_violation(VALIDATE_Z).is_none()), detail));
        }

        checks.push(monotone_check(&spec, k, d, cfg.method(), cell(3)));
        checks.push(drift_check(&spec, k, d, report.lambda_lb, cell(4))?);
    }
    Ok(ValidationReport { checks })
}

fn monotone_check(spec: &ServiceSpec, k: usize, d: usize, method: Method, seed: u64) -> CheckResult {
    let Some(b_max) = spec.max_support() else {
        return check("monotone_profile", d, None, format!("{} law is not enumerable", spec.kind_name()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..VALIDATE_MONOTONE_STATES {
        let mut s: Vec<u64> = (0..k).map(|_| rng.random_range(0..=2 * b_max)).collect();
        s.sort_unstable();
        let top = s[k - 1];
        s[k - d..].fill(top);
        match monotone_fi_check(&s, spec, d, method) {
            Ok(m) if m.monotone => {}
            Ok(m) => {
                return check(
                    "monotone_profile",
                    d,
                    Some(false),
                    format!("state {s:?}: f decreases at rank {:?}", m.first_violation),
                )
            }
            Err(e) => return check("monotone_profile", d, None, e.to_string()),
        }
    }
    check("monotone_profile", d, Some(true), format!("{VALIDATE_MONOTONE_STATES} ordered states"))
}

fn drift_check(spec: &ServiceSpec, k: usize, d: usize, lambda_lb: f64, seed: u64) -> Result<CheckResult, CliError> {
    let lambda = 0.95 * lambda_lb;
    let Some(b_max) = spec.max_support().filter(|_| spec.is_samplable()) else {
        return Ok(check("drift", d, None, format!("{} law cannot be sampled", spec.kind_name())));
    };
    if lambda >= 1.0 {
        return Ok(check("drift", d, None, format!("0.95 lambda_lb = {lambda} is not a valid rate")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut most) = (f64::NEG_INFINITY, 0);
    for n in 0..VALIDATE_DRIFT_STATES {
        let s = drift_state(&mut rng, k, d, b_max, VALIDATE_DRIFT_SCALE);
        let state = WorkloadState::from_parts(s.clone(), 0);
        let mut samples = VALIDATE_DRIFT_SAMPLES;
        // not separated from zero either way: spend more samples before deciding
        let est = loop {
            let est = drift_estimate(&state, lambda, spec, d, samples, cell_seed(seed, 1, n as u64))?;
            let negative = est.mean + VALIDATE_Z * est.std_error < 0.0;
            let positive = est.mean - VALIDATE_Z * est.std_error > 0.0;
            if negative || positive || samples >= VALIDATE_DRIFT_MAX_SAMPLES {
                break est;
            }
            samples *= 10;
        };
        most = most.max(samples);
        if est.mean + VALIDATE_Z * est.std_error >= 0.0 {
            return Ok(check(
                "drift",
                d,
                Some(false),
                format!(
                    "state {s:?}: drift {:.3} (se {:.3}, {samples} samples) at lambda {lambda:.6}",
                    est.mean, est.std_error
                ),
            ));
        }
        worst = worst.max(est.mean / est.std_error);
    }
    Ok(check(
        "drift",
        d,
        Some(true),
        format!(
            "drift negative at all probed states ({VALIDATE_DRIFT_STATES} at lambda {lambda:.6}, largest z = {worst:.2}, up to {most} samples)"
        ),
    ))
}

/// A non-decreasing state with balanced top `d` and maximum in
/// `scale * [10 B_max, 40 B_max]`.
pub fn drift_state<R: Rng>(rng: &mut R, k: usize, d: usize, b_max: u64, scale: u64) -> Vec<u64> {
    let top = rng.random_range(10 * b_max..=40 * b_max);
    let mut s: Vec<u64> = (0..k).map(|_| rng.random_range(0..=top)).collect();
    s.sort_unstable();
    s[k - d..].fill(top);
    s.iter().map(|x| x * scale).collect()
}
