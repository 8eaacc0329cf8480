//! Long-horizon runs of the workload chain, stability verdicts, parameter
//! sweeps and the statistical validations (balance, overlap frequencies,
//! ranked incoming work, Lyapunov drift, oracle equivalence).

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::{Bernoulli, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::overlap_table;
use crate::distributions::{DistError, ServiceSampler, ServiceSpec};
use crate::model::{departure_slot, top_d_equal, Arrival, Departure, OracleState, RoutingDraw, SlotInput, WorkloadState};
use crate::seeding::{cell_seed, RNG_ALGORITHM};

pub const DEFAULT_STRIDE: u64 = 100;
pub const DEFAULT_WINDOW_FRACTION: f64 = 0.5;
/// Slope of total workload per slot below which a run is called stable.
pub const DEFAULT_SLOPE_TOL: f64 = 0.02;
pub const DEFAULT_ORACLE_K_CAP: usize = 6;
pub const DEFAULT_ORACLE_SLOT_CAP: u64 = 10_000_000;
/// Ceiling on `cells * slots` for one sweep.
pub const DEFAULT_SWEEP_SLOT_BUDGET: u128 = 100_000_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("balance violated at slot {slot}: {workloads:?}")]
    Balance { slot: u64, workloads: Vec<u64> },
    #[error("sweep needs {required} slot-steps, above the budget of {cap}")]
    ResourceCap { required: u128, cap: u128 },
    #[error("oracle co-simulation limited to K <= {k_cap} and slots <= {slot_cap}")]
    OracleCap { k_cap: usize, slot_cap: u64 },
    #[error("trailing window holds {points} series points, need at least 3")]
    WindowTooShort { points: usize },
}

/// One simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub k: usize,
    pub d: usize,
    pub lambda: f64,
    pub slots: u64,
    pub burn_in: u64,
    pub seed: u64,
    /// Record the total workload every `stride` slots.
    pub stride: u64,
    pub spec: ServiceSpec,
}

impl RunConfig {
    /// Burn-in defaults to a tenth of the horizon.
    pub fn new(k: usize, d: usize, lambda: f64, slots: u64, seed: u64, spec: ServiceSpec) -> Self {
        Self {
            k,
            d,
            lambda,
            slots,
            burn_in: slots / 10,
            seed,
            stride: DEFAULT_STRIDE,
            spec,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.d == 0 || self.d > self.k {
            return bad(format!("need 1 <= d <= K, got K={}, d={}", self.k, self.d));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad(format!("need 0 < lambda < 1, got {}", self.lambda));
        }
        if self.slots == 0 {
            return bad("slots must be positive".into());
        }
        if self.burn_in >= self.slots {
            return bad(format!("burn_in {} must be below slots {}", self.burn_in, self.slots));
        }
        if self.stride == 0 {
            return bad("stride must be >= 1".into());
        }
        if let Some(jk) = self.spec.fixed_dimension() {
            if jk != self.k {
                return bad(format!("joint law has {jk} coordinates but K={}", self.k));
            }
        }
        Ok(())
    }

    fn sampler(&self) -> Result<ServiceSampler, SimError> {
        self.validate()?;
        Ok(self.spec.sampler(self.k)?)
    }
}

/// Source of slot inputs shared by every driver in this module: Bernoulli
/// arrivals, uniform routing, and a service vector from the law.
struct InputStream {
    rng: ChaCha8Rng,
    arrivals: Bernoulli,
    sampler: ServiceSampler,
    d: usize,
    scratch: Vec<usize>,
    arrival: Arrival,
}

impl InputStream {
    fn new(cfg: &RunConfig, lambda: f64, seed: u64) -> Result<Self, SimError> {
        let sampler = cfg.sampler()?;
        let arrivals = Bernoulli::new(lambda).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            arrivals,
            sampler,
            d: cfg.d,
            scratch: (0..cfg.k).collect(),
            arrival: Arrival::new(RoutingDraw::buffer(cfg.d), vec![1; cfg.k]),
        })
    }

    /// Next slot's arrival, if any. With `full` every service coordinate is
    /// drawn; otherwise only the routed ones are guaranteed fresh.
    fn next(&mut self, full: bool) -> Option<&Arrival> {
        if !self.arrivals.sample(&mut self.rng) {
            return None;
        }
        let a = &mut self.arrival;
        RoutingDraw::sample_into(&mut self.rng, self.d, &mut self.scratch, a.routing.servers_mut());
        if full {
            self.sampler.sample_into(&mut self.rng, &mut a.services);
        } else {
            self.sampler.sample_routed(&mut self.rng, a.routing.servers(), &mut a.services);
        }
        Some(&self.arrival)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    /// Time-average of the total workload over slots after burn-in.
    pub mean_workload: f64,
    pub max_workload: u64,
    pub per_server_mean: Vec<f64>,
    /// Jobs that arrived after burn-in.
    pub jobs: u64,
    /// Mean sojourn (arrival slot through departure slot) of those jobs.
    pub mean_sojourn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub summary: TraceSummary,
    /// `(slot, total workload)` every `stride` slots.
    pub series: Vec<(u64, u64)>,
    pub stride: u64,
    pub slots: u64,
    pub burn_in: u64,
    pub rng_algorithm: String,
    pub seed: u64,
}

/// Simulates `cfg.slots` slots from the empty state. The balance property is
/// checked after every slot; a violation aborts the run.
pub fn run(cfg: &RunConfig) -> Result<Trace, SimError> {
    let k = cfg.k;
    let mut inputs = InputStream::new(cfg, cfg.lambda, cfg.seed)?;
    let mut state = WorkloadState::empty(k);
    let mut series = Vec::with_capacity((cfg.slots / cfg.stride) as usize + 1);
    let mut total_sum: u128 = 0;
    let mut server_sum = vec![0u128; k];
    let mut max_workload = 0u64;
    let (mut jobs, mut sojourn_sum) = (0u64, 0u128);

    for t in 1..=cfg.slots {
        let sojourn = state.advance(inputs.next(false));
        let w = state.workloads();
        if !top_d_equal(w, cfg.d) {
            return Err(SimError::Balance {
                slot: t,
                workloads: w.to_vec(),
            });
        }
        if t > cfg.burn_in {
            let mut total = 0u64;
            for (acc, &x) in server_sum.iter_mut().zip(w) {
                *acc += x as u128;
                total += x;
                max_workload = max_workload.max(x);
            }
            total_sum += total as u128;
            if let Some(s) = sojourn {
                jobs += 1;
                sojourn_sum += s as u128;
            }
        }
        if t % cfg.stride == 0 {
            series.push((t, state.total()));
        }
    }

    let n = (cfg.slots - cfg.burn_in) as f64;
    Ok(Trace {
        summary: TraceSummary {
            mean_workload: total_sum as f64 / n,
            max_workload,
            per_server_mean: server_sum.iter().map(|&s| s as f64 / n).collect(),
            jobs,
            mean_sojourn: if jobs > 0 { sojourn_sum as f64 / jobs as f64 } else { 0.0 },
        },
        series,
        stride: cfg.stride,
        slots: cfg.slots,
        burn_in: cfg.burn_in,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        seed: cfg.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Stable,
    Unstable,
    Inconclusive,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Stable => "stable",
            Verdict::Unstable => "unstable",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub verdict: Verdict,
    /// Least-squares slope of total workload per slot over the window.
    pub slope: f64,
}

/// Least-squares slope of `(x, y)` points.
fn ols_slope(points: &[(u64, u64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(x, y) in points {
        let dx = x as f64 - mx;
        sxy += dx * (y as f64 - my);
        sxx += dx * dx;
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Classifies a run by the trend of total workload over the trailing
/// `window_fraction` of the horizon (never reaching into burn-in): below
/// `slope_tol` per slot is stable, above `10 * slope_tol` unstable.
pub fn stability_verdict(trace: &Trace, window_fraction: f64, slope_tol: f64) -> Result<VerdictReport, SimError> {
    let start = ((trace.slots as f64) * (1.0 - window_fraction.clamp(0.0, 1.0))) as u64;
    let start = start.max(trace.burn_in);
    let window: Vec<(u64, u64)> = trace.series.iter().copied().filter(|&(t, _)| t > start).collect();
    if window.len() < 3 {
        return Err(SimError::WindowTooShort { points: window.len() });
    }
    let slope = ols_slope(&window);
    let verdict = if slope < slope_tol {
        Verdict::Stable
    } else if slope > 10.0 * slope_tol {
        Verdict::Unstable
    } else {
        Verdict::Inconclusive
    };
    Ok(VerdictReport { verdict, slope })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub window_fraction: f64,
    pub slope_tol: f64,
    pub slot_budget: u128,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            window_fraction: DEFAULT_WINDOW_FRACTION,
            slope_tol: DEFAULT_SLOPE_TOL,
            slot_budget: DEFAULT_SWEEP_SLOT_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub d: usize,
    pub lambda: f64,
    pub mean_workload: f64,
    pub slope: f64,
    pub verdict: Verdict,
    pub slots: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub k: usize,
    pub base_seed: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Largest grid `lambda` for `d` such that it and every smaller grid
    /// value were judged stable.
    pub fn edge(&self, d: usize) -> Option<f64> {
        let mut rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.d == d).collect();
        rows.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        rows.iter()
            .take_while(|r| r.verdict == Verdict::Stable)
            .last()
            .map(|r| r.lambda)
    }
}

/// One run per `(d, lambda)` cell. Cell `(i, j)` uses seed
/// `cell_seed(base.seed, i, j)`; rows come back in `ds`-major order whatever
/// the thread count.
pub fn sweep(
    base: &RunConfig,
    ds: &[usize],
    lambdas: &[f64],
    parallelism: usize,
    opts: &SweepOptions,
) -> Result<SweepResult, SimError> {
    if ds.is_empty() || lambdas.is_empty() {
        return Err(SimError::InvalidConfig("sweep needs non-empty d and lambda lists".into()));
    }
    let cells = (ds.len() * lambdas.len()) as u128;
    let required = cells * base.slots as u128;
    if required > opts.slot_budget {
        return Err(SimError::ResourceCap {
            required,
            cap: opts.slot_budget,
        });
    }
    let configs: Vec<RunConfig> = ds
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| {
            lambdas.iter().enumerate().map(move |(j, &lambda)| RunConfig {
                d,
                lambda,
                seed: cell_seed(base.seed, i as u64, j as u64),
                ..base.clone()
            })
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    let rows: Result<Vec<SweepRow>, SimError> = pool.install(|| {
        configs
            .par_iter()
            .map(|c| {
                let trace = run(c)?;
                let v = stability_verdict(&trace, opts.window_fraction, opts.slope_tol)?;
                Ok(SweepRow {
                    d: c.d,
                    lambda: c.lambda,
                    mean_workload: trace.summary.mean_workload,
                    slope: v.slope,
                    verdict: v.verdict,
                    slots: c.slots,
                    seed: c.seed,
                })
            })
            .collect()
    });
    Ok(SweepResult {
        k: base.k,
        base_seed: base.seed,
        rows: rows?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: u64,
}

/// Monte-Carlo estimate of `E[L(W(1)) - L(W(0)) | W(0) = state]` for the
/// quadratic `L(w) = sum w_i^2`.
pub fn drift_estimate(
    state: &WorkloadState,
    lambda: f64,
    spec: &ServiceSpec,
    d: usize,
    samples: u64,
    seed: u64,
) -> Result<DriftEstimate, SimError> {
    if samples == 0 {
        return Err(SimError::InvalidConfig("drift needs at least one sample".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SimError::InvalidConfig(format!("lambda {lambda} outside [0, 1]")));
    }
    let k = state.k();
    let cfg = RunConfig::new(k, d, 0.5, 1, seed, spec.clone());
    let mut inputs = InputStream::new(&cfg, lambda, seed)?;
    let base: i128 = state.workloads().iter().map(|&x| (x as i128) * (x as i128)).sum();
    let (mut s, mut s2) = (0.0f64, 0.0f64);
    let mut next = state.clone();
    for _ in 0..samples {
        next.clone_from(state);
        next.advance(inputs.next(false));
        let l: i128 = next.workloads().iter().map(|&x| (x as i128) * (x as i128)).sum();
        let delta = (l - base) as f64;
        s += delta;
        s2 += delta * delta;
    }
    let n = samples as f64;
    let mean = s / n;
    let var = if samples > 1 {
        ((s2 - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(DriftEstimate {
        mean,
        std_error: (var / n).sqrt(),
        samples,
    })
}

/// Per-arrival statistics gathered along one run from the empty state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalStats {
    pub arrivals: u64,
    /// Arrivals whose routing hit exactly `m` of the current top-`d` servers.
    pub overlap_counts: Vec<u64>,
    pub overlap_expected: Vec<f64>,
    /// Mean work received by the server of workload rank `r` (0 = smallest).
    pub ranked_mean: Vec<f64>,
    /// Mean and standard error of `A_(r) - A_(r+1)` per arrival.
    pub ranked_diff_mean: Vec<f64>,
    pub ranked_diff_se: Vec<f64>,
}

impl ArrivalStats {
    /// First `m` whose observed frequency is more than `z` standard errors
    /// from `P_m`.
    pub fn overlap_outlier(&self, z: f64) -> Option<usize> {
        let n = self.arrivals as f64;
        (0..self.overlap_counts.len()).find(|&m| {
            let p = self.overlap_expected[m];
            let freq = self.overlap_counts[m] as f64 / n;
            let sd = (p * (1.0 - p) / n).sqrt();
            if sd == 0.0 {
                (freq - p).abs() > 1e-12
            } else {
                (freq - p).abs() > z * sd
            }
        })
    }

    /// First rank `r` with `A_(r) - A_(r+1)` significantly negative.
    pub fn rank_violation(&self, z: f64) -> Option<usize> {
        (0..self.ranked_diff_mean.len()).find(|&r| self.ranked_diff_mean[r] < -z * self.ranked_diff_se[r])
    }
}

/// Runs the chain until `arrivals` jobs have arrived, classifying each
/// arrival against the workloads it found. Servers are ranked by
/// `(workload, index)`; the top `d` are the last `d` in that order.
pub fn arrival_statistics(cfg: &RunConfig, arrivals: u64) -> Result<ArrivalStats, SimError> {
    let (k, d) = (cfg.k, cfg.d);
    let mut inputs = InputStream::new(cfg, cfg.lambda, cfg.seed)?;
    let mut state = WorkloadState::empty(k);
    let mut seen = 0u64;
    let mut overlap_counts = vec![0u64; d + 1];
    let mut ranked_sum = vec![0.0f64; k];
    let (mut diff_sum, mut diff_sum2) = (vec![0.0f64; k - 1], vec![0.0f64; k - 1]);
    let mut order: Vec<usize> = (0..k).collect();
    let mut work = vec![0u64; k];
    while seen < arrivals {
        let arrival = inputs.next(false);
        if let Some(a) = arrival {
            let w = state.workloads();
            order.sort_by_key(|&i| (w[i], i));
            let g = a.routing.servers();
            let m = order[k - d..].iter().filter(|&&i| g.contains(&i)).count();
            overlap_counts[m] += 1;
            let horizon = g.iter().map(|&j| w[j] + a.services[j]).min().unwrap();
            work.fill(0);
            for &i in g {
                work[i] = horizon.saturating_sub(w[i]);
            }
            for r in 0..k {
                ranked_sum[r] += work[order[r]] as f64;
                if r + 1 < k {
                    let diff = work[order[r]] as f64 - work[order[r + 1]] as f64;
                    diff_sum[r] += diff;
                    diff_sum2[r] += diff * diff;
                }
            }
            seen += 1;
        }
        state.advance(arrival);
        if !top_d_equal(state.workloads(), d) {
            return Err(SimError::Balance {
                slot: state.slot(),
                workloads: state.workloads().to_vec(),
            });
        }
    }
    let n = seen as f64;
    let se = |s: f64, s2: f64| {
        let mean = s / n;
        ((s2 / n - mean * mean).max(0.0) / (n - 1.0).max(1.0)).sqrt()
    };
    Ok(ArrivalStats {
        arrivals: seen,
        overlap_counts,
        overlap_expected: overlap_table(k, d).map_err(|e| SimError::InvalidConfig(e.to_string()))?,
        ranked_mean: ranked_sum.iter().map(|s| s / n).collect(),
        ranked_diff_mean: diff_sum.iter().map(|s| s / n).collect(),
        ranked_diff_se: diff_sum.iter().zip(&diff_sum2).map(|(&a, &b)| se(a, b)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Divergence {
    /// Recursion and oracle disagree on the workload vector after `slot`.
    Workload {
        slot: u64,
        recursion: Vec<u64>,
        oracle: Vec<u64>,
    },
    /// A job departed at a different slot or server than predicted, or not
    /// at all (`observed: None`).
    Departure {
        slot: u64,
        job: u64,
        expected: Departure,
        observed: Option<Departure>,
    },
}

impl std::fmt::Display for Divergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Divergence::Workload { slot, recursion, oracle } => {
                write!(f, "slot {slot}: recursion {recursion:?} != oracle {oracle:?}")
            }
            Divergence::Departure {
                slot,
                job,
                expected,
                observed,
            } => write!(
                f,
                "slot {slot}: job {job} expected to depart at slot {} from server {}, observed {observed:?}",
                expected.slot, expected.server
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub slots: u64,
    pub jobs: u64,
    pub departures_checked: u64,
    pub divergence: Option<Divergence>,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.divergence.is_none()
    }
}

/// Co-simulates the recursion and the task-level oracle on identical input
/// streams with the default caps.
pub fn validate_equivalence(cfg: &RunConfig) -> Result<EquivalenceReport, SimError> {
    validate_equivalence_with(cfg, DEFAULT_ORACLE_K_CAP, DEFAULT_ORACLE_SLOT_CAP, |s, input| {
        s.step(input).expect("generated inputs are valid")
    })
}

/// Like [`validate_equivalence`] with explicit caps and a replaceable
/// recursion step, so a faulty rule can be injected.
pub fn validate_equivalence_with<F>(cfg: &RunConfig, k_cap: usize, slot_cap: u64, step: F) -> Result<EquivalenceReport, SimError>
where
    F: Fn(&WorkloadState, &SlotInput) -> WorkloadState,
{
    if cfg.k > k_cap || cfg.slots > slot_cap {
        return Err(SimError::OracleCap { k_cap, slot_cap });
    }
    let mut inputs = InputStream::new(cfg, cfg.lambda, cfg.seed)?;
    let mut state = WorkloadState::empty(cfg.k);
    let mut oracle = OracleState::empty(cfg.k);
    let mut predicted: BTreeMap<u64, Departure> = BTreeMap::new();
    let mut due: BTreeSet<(u64, u64)> = BTreeSet::new();
    let (mut jobs, mut checked) = (0u64, 0u64);

    for t in 1..=cfg.slots {
        let input = match inputs.next(true) {
            Some(a) => SlotInput::with_arrival(a.routing.clone(), a.services.clone()),
            None => SlotInput::idle(),
        };
        if let Some(a) = input.arrival() {
            let dep = departure_slot(&state, &a.routing, &a.services).expect("generated inputs are valid");
            predicted.insert(jobs, dep);
            due.insert((dep.slot, jobs));
            jobs += 1;
        }
        state = step(&state, &input);
        oracle.begin_slot(&input);
        let departed = oracle.serve();

        let drain = oracle.drain_times();
        if drain != state.workloads() {
            return Ok(report(t, jobs, checked, Divergence::Workload {
                slot: t,
                recursion: state.workloads().to_vec(),
                oracle: drain,
            }));
        }
        for job in departed {
            let expected = predicted.remove(&job).expect("oracle departs only known jobs");
            let observed = oracle.job(job).and_then(|r| r.departure);
            if observed != Some(expected) {
                return Ok(report(t, jobs, checked, Divergence::Departure {
                    slot: t,
                    job,
                    expected,
                    observed,
                }));
            }
            due.remove(&(expected.slot, job));
            checked += 1;
        }
        if let Some(&(slot, job)) = due.first() {
            if slot <= t {
                return Ok(report(t, jobs, checked, Divergence::Departure {
                    slot: t,
                    job,
                    expected: predicted[&job],
                    observed: None,
                }));
            }
        }
        if t % 1024 == 0 {
            oracle.forget_departed();
        }
    }
    Ok(EquivalenceReport {
        slots: cfg.slots,
        jobs,
        departures_checked: checked,
        divergence: None,
    })
}

fn report(slots: u64, jobs: u64, checked: u64, divergence: Divergence) -> EquivalenceReport {
    EquivalenceReport {
        slots,
        jobs,
        departures_checked: checked,
        divergence: Some(divergence),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Pmf;

    fn two_point_10_100() -> ServiceSpec {
        ServiceSpec::iid(Pmf::two_point(10, 0.9, 100).unwrap())
    }

    #[test]
    fn config_validation() {
        let ok = RunConfig::new(4, 2, 0.1, 1000, 1, two_point_10_100());
        assert!(ok.validate().is_ok());
        assert!(RunConfig { d: 5, ..ok.clone() }.validate().is_err());
        assert!(RunConfig { lambda: 1.0, ..ok.clone() }.validate().is_err());
        assert!(RunConfig { lambda: 0.0, ..ok.clone() }.validate().is_err());
        assert!(RunConfig { burn_in: 1000, ..ok.clone() }.validate().is_err());
        assert!(RunConfig { stride: 0, ..ok.clone() }.validate().is_err());
        let prof = RunConfig {
            spec: ServiceSpec::profile(vec![5.0]).unwrap(),
            ..ok
        };
        assert_eq!(run(&prof).unwrap_err(), SimError::Dist(DistError::NotSamplable));
    }

    #[test]
    fn near_zero_load_stays_empty() {
        let cfg = RunConfig::new(5, 2, 1e-6, 50_000, 4, two_point_10_100());
        let t = run(&cfg).unwrap();
        assert!(t.summary.mean_workload < 0.1);
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = RunConfig::new(6, 3, 0.2, 20_000, 77, two_point_10_100());
        assert_eq!(run(&cfg).unwrap(), run(&cfg).unwrap());
        let other = run(&RunConfig { seed: 78, ..cfg.clone() }).unwrap();
        assert_ne!(run(&cfg).unwrap().series, other.series);
    }

    #[test]
    fn series_respects_stride() {
        let cfg = RunConfig {
            stride: 7,
            ..RunConfig::new(3, 2, 0.05, 100, 1, two_point_10_100())
        };
        let t = run(&cfg).unwrap();
        assert_eq!(t.series.len(), 14);
        assert!(t.series.iter().all(|&(s, _)| s % 7 == 0));
    }

    fn trace_from(series: Vec<(u64, u64)>, slots: u64) -> Trace {
        Trace {
            summary: TraceSummary {
                mean_workload: 0.0,
                max_workload: 0,
                per_server_mean: vec![],
                jobs: 0,
                mean_sojourn: 0.0,
            },
            series,
            stride: 1,
            slots,
            burn_in: 0,
            rng_algorithm: String::new(),
            seed: 0,
        }
    }

    #[test]
    fn verdict_on_synthetic_series() {
        let flat = trace_from((1..=100).map(|t| (t, 0)).collect(), 100);
        assert_eq!(stability_verdict(&flat, 0.5, 0.02).unwrap().verdict, Verdict::Stable);
        let ramp = trace_from((1..=100).map(|t| (t, t)).collect(), 100);
        let v = stability_verdict(&ramp, 0.5, 0.02).unwrap();
        assert_eq!(v.verdict, Verdict::Unstable);
        assert!((v.slope - 1.0).abs() < 1e-12);
        let slow = trace_from((1..=100).map(|t| (t, t / 20)).collect(), 100);
        assert_eq!(stability_verdict(&slow, 0.5, 0.02).unwrap().verdict, Verdict::Inconclusive);
        let short = trace_from(vec![(1, 0), (2, 0)], 2);
        assert!(matches!(stability_verdict(&short, 0.5, 0.02), Err(SimError::WindowTooShort { .. })));
    }

    #[test]
    fn verdict_separates_d1_edge() {
        // d = 1: the region is lambda < K / E[B] = 10/19 ~ 0.526
        let base = RunConfig::new(10, 1, 0.51, 1_000_000, 21, two_point_10_100());
        let below = run(&base).unwrap();
        let above = run(&RunConfig { lambda: 0.55, ..base }).unwrap();
        let vb = stability_verdict(&below, 0.5, DEFAULT_SLOPE_TOL).unwrap();
        let va = stability_verdict(&above, 0.5, DEFAULT_SLOPE_TOL).unwrap();
        assert_eq!(vb.verdict, Verdict::Stable, "{vb:?}");
        assert_eq!(va.verdict, Verdict::Unstable, "{va:?}");
        assert!(above.summary.mean_workload > 10.0 * below.summary.mean_workload);
    }

    #[test]
    fn full_redundancy_is_stable_inside_known_region() {
        let cfg = RunConfig::new(10, 10, 0.05, 200_000, 5, two_point_10_100());
        let t = run(&cfg).unwrap();
        assert_eq!(stability_verdict(&t, 0.5, DEFAULT_SLOPE_TOL).unwrap().verdict, Verdict::Stable);
        assert!(t.summary.mean_workload.is_finite());
    }

    #[test]
    fn single_cell_sweep_equals_run() {
        let base = RunConfig::new(5, 2, 0.1, 20_000, 9, two_point_10_100());
        let res = sweep(&base, &[2], &[0.1], 1, &SweepOptions::default()).unwrap();
        let direct = run(&RunConfig {
            seed: cell_seed(9, 0, 0),
            ..base
        })
        .unwrap();
        assert_eq!(res.rows.len(), 1);
        assert_eq!(res.rows[0].mean_workload, direct.summary.mean_workload);
    }

    #[test]
    fn sweep_is_independent_of_parallelism() {
        let base = RunConfig::new(5, 2, 0.1, 20_000, 3, two_point_10_100());
        let ds = [1, 2, 5];
        let ls = [0.05, 0.1, 0.2];
        let a = sweep(&base, &ds, &ls, 1, &SweepOptions::default()).unwrap();
        let b = sweep(&base, &ds, &ls, 4, &SweepOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.iter().map(|r| (r.d, r.lambda)).collect::<Vec<_>>()[..3], [(1, 0.05), (1, 0.1), (1, 0.2)]);
    }

    #[test]
    fn sweep_refusals() {
        let base = RunConfig::new(5, 2, 0.1, 1_000, 3, two_point_10_100());
        assert!(matches!(
            sweep(&base, &[], &[0.1], 1, &SweepOptions::default()),
            Err(SimError::InvalidConfig(_))
        ));
        let tight = SweepOptions {
            slot_budget: 1_500,
            ..Default::default()
        };
        assert_eq!(
            sweep(&base, &[1, 2], &[0.1], 1, &tight),
            Err(SimError::ResourceCap { required: 2_000, cap: 1_500 })
        );
    }

    #[test]
    fn edge_takes_the_stable_prefix() {
        let row = |lambda, verdict| SweepRow {
            d: 1,
            lambda,
            mean_workload: 0.0,
            slope: 0.0,
            verdict,
            slots: 1,
            seed: 0,
        };
        let res = SweepResult {
            k: 1,
            base_seed: 0,
            rows: vec![
                row(0.3, Verdict::Unstable),
                row(0.1, Verdict::Stable),
                row(0.2, Verdict::Stable),
                row(0.4, Verdict::Stable),
            ],
        };
        assert_eq!(res.edge(1), Some(0.2));
        assert_eq!(res.edge(2), None);
    }

    #[test]
    fn drift_without_arrivals_is_deterministic() {
        let s = WorkloadState::from_parts(vec![3, 5, 5], 0);
        let e = drift_estimate(&s, 0.0, &two_point_10_100(), 2, 100, 1).unwrap();
        assert_eq!(e.mean, (-6.0 + 1.0) + 2.0 * (-10.0 + 1.0));
        assert_eq!(e.std_error, 0.0);
    }

    #[test]
    fn drift_from_empty_is_non_negative() {
        let s = WorkloadState::empty(4);
        let e = drift_estimate(&s, 0.3, &two_point_10_100(), 2, 2000, 1).unwrap();
        assert!(e.mean >= 0.0);
    }

    #[test]
    fn small_equivalence_run() {
        for d in 1..=3 {
            // below 1/g_1, so every d drains
            let cfg = RunConfig::new(3, d, 0.045, 50_000, 11, two_point_10_100());
            let r = validate_equivalence(&cfg).unwrap();
            assert!(r.passed(), "{:?}", r.divergence);
            assert!(r.departures_checked > 2_000, "{r:?}");
        }
    }

    #[test]
    fn mutated_rule_is_caught() {
        let cfg = RunConfig::new(3, 2, 0.15, 20_000, 11, two_point_10_100());
        // forgets cancellation: every routed server takes its full task
        let r = validate_equivalence_with(&cfg, 6, 1_000_000, |s, input| {
            let mut w = s.workloads().to_vec();
            if let Some(a) = input.arrival() {
                for &j in a.routing.servers() {
                    w[j] += a.services[j];
                }
            }
            WorkloadState::from_parts(w.iter().map(|x| x.saturating_sub(1)).collect(), s.slot() + 1)
        })
        .unwrap();
        assert!(matches!(r.divergence, Some(Divergence::Workload { .. })));
    }

    #[test]
    fn oracle_cap_is_enforced() {
        let cfg = RunConfig::new(8, 2, 0.1, 100, 1, two_point_10_100());
        assert!(matches!(validate_equivalence(&cfg), Err(SimError::OracleCap { .. })));
    }
}
