//! CSV and JSON writers for the command line.
//!
//! Every CSV starts with one `#`-prefixed metadata line naming the tool
//! version, the base seed and the RNG, then a header row. Reals are written
//! as `{:.14e}`, which keeps 15 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::bounds::{BoundReport, LambdaMEstimate};
use crate::seeding::{RNG_ALGORITHM, SEED_DERIVATION};
use crate::simulator::{SweepResult, Trace};

pub const SWEEP_HEADER: &str = "d,lambda,mean_workload,slope,verdict,slots,seed";
pub const BOUNDS_HEADER: &str = "d,lambda_lb,known_bound,best_bound";
pub const REPORT_HEADER: &str = "K,d,service_kind,lambda_lb,known_bound,best_bound,time_scaling_ok,lambda_m,lambda_m_std_error";
pub const LAMBDA_M_HEADER: &str = "d,lambda_lb,lambda_m,max_work,std_error,method,cells,argmax";
pub const TRACE_HEADER: &str = "slot,total_workload";

pub fn real(x: f64) -> String {
    format!("{x:.14e}")
}

fn opt_real(x: Option<f64>) -> String {
    x.map(real).unwrap_or_default()
}

pub fn metadata_line(seed: Option<u64>) -> String {
    let seed = seed.map_or_else(|| "none".to_string(), |s| s.to_string());
    format!(
        "# rdsim {}; seed={seed}; rng={RNG_ALGORITHM}; cell_seed={SEED_DERIVATION}",
        env!("CARGO_PKG_VERSION")
    )
}

fn with_header(seed: Option<u64>, header: &str) -> String {
    format!("{}\n{header}\n", metadata_line(seed))
}

pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = with_header(Some(result.base_seed), SWEEP_HEADER);
    for r in &result.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.d,
            real(r.lambda),
            real(r.mean_workload),
            real(r.slope),
            r.verdict,
            r.slots,
            r.seed
        );
    }
    out
}

pub fn bounds_csv(reports: &[BoundReport], seed: Option<u64>) -> String {
    let mut out = with_header(seed, BOUNDS_HEADER);
    for r in reports {
        let _ = writeln!(out, "{},{},{},{}", r.d, real(r.lambda_lb), real(r.known_bound), real(r.best_bound));
    }
    out
}

pub fn report_csv(reports: &[BoundReport], seed: Option<u64>) -> String {
    let mut out = with_header(seed, REPORT_HEADER);
    for r in reports {
        let lm = r.lambda_m.as_ref();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.k,
            r.d,
            r.service_kind,
            real(r.lambda_lb),
            real(r.known_bound),
            real(r.best_bound),
            r.time_scaling_ok,
            opt_real(lm.map(|e| e.value)),
            opt_real(lm.and_then(|e| e.std_error)),
        );
    }
    out
}

pub fn lambda_m_csv(rows: &[(usize, f64, LambdaMEstimate)], seed: Option<u64>) -> String {
    let mut out = with_header(seed, LAMBDA_M_HEADER);
    for (d, lb, e) in rows {
        let argmax: Vec<String> = e.argmax.delta().iter().map(|x| x.to_string()).collect();
        let _ = writeln!(
            out,
            "{d},{},{},{},{},{},{},{}",
            real(*lb),
            real(e.value),
            real(e.max_work),
            opt_real(e.std_error),
            e.method,
            e.cells,
            argmax.join(" ")
        );
    }
    out
}

pub fn trace_csv(trace: &Trace) -> String {
    let mut out = with_header(Some(trace.seed), TRACE_HEADER);
    for (slot, total) in &trace.series {
        let _ = writeln!(out, "{slot},{total}");
    }
    out
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

/// Writes `contents` to `dir/name`, creating `dir` if needed.
pub fn write_file(dir: &Path, name: &str, contents: &str) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)
}

/// Reads back the non-comment rows of a CSV written here.
pub fn read_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}
