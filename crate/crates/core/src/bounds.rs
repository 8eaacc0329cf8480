//! Stability bounds for R(d): the overlap probabilities `P_m`, the closed
//! form `lambda_lb`, the K-independent bound `1/E[min_d B]`, and a grid
//! search for the gap-vector bound `lambda_m`.
//!
//! `lambda_m` is an infimum over the gaps between consecutive ordered
//! workloads. The reachable gaps are not characterized, so the search runs
//! over every non-negative gap vector whose last `d - 1` entries are zero.
//! That set contains the reachable one, so the value found is still a valid
//! stability bound and still dominates `lambda_lb`. Each free gap is capped at
//! the largest service value: beyond it `[B_j + gap]^+` can no longer change
//! which replica finishes first, so the capped grid is exact.

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{time_scaling_check, DistError, ServiceSpec};
use crate::model::RoutingDraw;
use crate::seeding::cell_seed;

/// Default ceiling on enumerated (subset, tuple) points per expectation.
pub const DEFAULT_SUPPORT_CAP: u128 = 1 << 22;
/// Default ceiling on gap-grid cells for the lambda_m search.
pub const DEFAULT_GRID_CELL_CAP: u128 = 2_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundsError {
    #[error("invalid arguments: {0}")]
    InvalidArgs(String),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("gap grid has {required} cells, above the cap of {cap}; raise the cap to at least {required}")]
    GridTooLarge { required: u128, cap: u128 },
    #[error("exact expectation needs an enumerable law, got {0}")]
    NotEnumerable(&'static str),
    #[error("state is not ordered non-decreasingly: {0:?}")]
    UnorderedState(Vec<u64>),
    #[error("invalid gap vector: {0}")]
    InvalidGap(String),
}

fn binomial(n: usize, r: usize) -> BigUint {
    if r > n {
        return BigUint::zero();
    }
    let r = r.min(n - r);
    let mut acc = BigUint::one();
    for i in 0..r {
        // exact at every step: acc * (n-i) is divisible by (i+1) after the product
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

fn check_kd(k: usize, d: usize) -> Result<(), BoundsError> {
    if d == 0 || d > k {
        return Err(BoundsError::InvalidArgs(format!("need 1 <= d <= K, got K={k}, d={d}")));
    }
    Ok(())
}

/// Probability that a uniform d-subset of K servers contains exactly `m` of
/// the `d` servers holding the largest workloads, as an exact rational.
pub fn overlap_prob_exact(k: usize, d: usize, m: usize) -> Result<BigRational, BoundsError> {
    check_kd(k, d)?;
    if m > d {
        return Err(BoundsError::InvalidArgs(format!("need m <= d, got m={m}, d={d}")));
    }
    let num = binomial(k - d, d - m) * binomial(d, m);
    let den = binomial(k, d);
    Ok(BigRational::new(BigInt::from(num), BigInt::from(den)))
}

pub fn overlap_prob(k: usize, d: usize, m: usize) -> Result<f64, BoundsError> {
    Ok(overlap_prob_exact(k, d, m)?.to_f64().expect("probability is finite"))
}

/// `[P_0, ..., P_d]`.
pub fn overlap_table(k: usize, d: usize) -> Result<Vec<f64>, BoundsError> {
    (0..=d).map(|m| overlap_prob(k, d, m)).collect()
}

fn check_profile(g: &[f64]) -> Result<(), BoundsError> {
    let mut prev = f64::INFINITY;
    for (j, &x) in g.iter().enumerate() {
        if !(x.is_finite() && x > 0.0 && x <= prev) {
            return Err(BoundsError::InvalidArgs(format!(
                "min-moment profile must be positive and non-increasing; g[{}] = {x}",
                j + 1
            )));
        }
        prev = x;
    }
    Ok(())
}

/// Upper bound on the expected work one arrival brings:
/// `sum_m (g[1] + ... + g[d-m] + m g[d]) P_m`.
pub fn incoming_work_bound(k: usize, d: usize, g: &[f64]) -> Result<f64, BoundsError> {
    check_kd(k, d)?;
    if g.len() < d {
        return Err(BoundsError::InvalidArgs(format!("profile has {} entries, need {d}", g.len())));
    }
    let g = &g[..d];
    check_profile(g)?;
    let p = overlap_table(k, d)?;
    let mut prefix = vec![0.0; d + 1];
    for j in 0..d {
        prefix[j + 1] = prefix[j] + g[j];
    }
    Ok((0..=d).map(|m| (prefix[d - m] + m as f64 * g[d - 1]) * p[m]).sum())
}

/// Closed-form lower bound on the stability region.
pub fn lambda_lb(k: usize, d: usize, g: &[f64]) -> Result<f64, BoundsError> {
    Ok(k as f64 / incoming_work_bound(k, d, g)?)
}

/// `lambda_lb` for `d = 2` written through `m1 = E[B_1]`, `m2 = E[B_1 ^ B_2]`.
pub fn lambda_lb_d2(k: usize, m1: f64, m2: f64) -> Result<f64, BoundsError> {
    check_kd(k, 2)?;
    if !(m2 > 0.0 && m2 <= m1 && m1.is_finite()) {
        return Err(BoundsError::InvalidArgs(format!("need 0 < m2 <= m1, got m1={m1}, m2={m2}")));
    }
    let p2 = overlap_prob(k, 2, 2)?;
    Ok(k as f64 / ((1.0 - p2) * m1 + (1.0 + p2) * m2))
}

/// The K-independent bound `1 / E[min(B_1..B_d)]`.
pub fn known_bound(g_d: f64) -> f64 {
    1.0 / g_d
}

/// Gaps between consecutive ordered workloads, `delta[i] = s[i+1] - s[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GapVector {
    delta: Vec<u64>,
}

impl GapVector {
    pub fn new(delta: Vec<u64>, k: usize, d: usize) -> Result<Self, BoundsError> {
        check_kd(k, d)?;
        if delta.len() != k - 1 {
            return Err(BoundsError::InvalidGap(format!("expected {} entries, got {}", k - 1, delta.len())));
        }
        if delta[k - d..].iter().any(|&x| x != 0) {
            return Err(BoundsError::InvalidGap(format!(
                "the last d-1 = {} gaps must be zero: {delta:?}",
                d - 1
            )));
        }
        Ok(Self { delta })
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            delta: vec![0; k.saturating_sub(1)],
        }
    }

    /// Recovers the gaps of an ordered state.
    pub fn from_state(s: &[u64], d: usize) -> Result<Self, BoundsError> {
        ensure_ordered(s)?;
        Self::new(s.windows(2).map(|w| w[1] - w[0]).collect(), s.len(), d)
    }

    pub fn delta(&self) -> &[u64] {
        &self.delta
    }

    /// `delta_{i,j} = s_j - s_i` (negative when `j < i`).
    pub fn cumulative(&self, i: usize, j: usize) -> i64 {
        let s = self.ordered_state();
        s[j] as i64 - s[i] as i64
    }

    /// The ordered state with `s[0] = 0` that has these gaps.
    pub fn ordered_state(&self) -> Vec<u64> {
        let mut s = Vec::with_capacity(self.delta.len() + 1);
        s.push(0);
        let mut acc = 0;
        for &x in &self.delta {
            acc += x;
            s.push(acc);
        }
        s
    }

    /// Caps every gap at `cap`.
    pub fn saturated(&self, cap: u64) -> Self {
        Self {
            delta: self.delta.iter().map(|&x| x.min(cap)).collect(),
        }
    }
}

fn ensure_ordered(s: &[u64]) -> Result<(), BoundsError> {
    if s.windows(2).any(|w| w[0] > w[1]) {
        return Err(BoundsError::UnorderedState(s.to_vec()));
    }
    Ok(())
}

/// How expectations over `(G_d, B)` are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    /// Enumerate every routing subset and the finite joint support.
    Exact { support_cap: u128 },
    /// Average over sampled `(G_d, B)` pairs.
    MonteCarlo { samples: u64, seed: u64 },
}

impl Method {
    pub fn exact() -> Self {
        Method::Exact {
            support_cap: DEFAULT_SUPPORT_CAP,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Exact { .. } => "exact",
            Method::MonteCarlo { .. } => "mc",
        }
    }
}

/// A value with an optional Monte-Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: Option<f64>,
}

/// Per-server expected incoming work `f_i(s) = E[1_i min_{j in G}[B_j + s_j - s_i]^+]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkProfile {
    pub f: Vec<f64>,
    /// Standard error of each `f_i` (Monte Carlo only).
    pub std_error: Option<Vec<f64>>,
    /// Standard error of `f_i - f_{i+1}` from paired samples (Monte Carlo only).
    pub diff_std_error: Option<Vec<f64>>,
    /// Standard error of `sum_i f_i` (Monte Carlo only).
    pub total_std_error: Option<f64>,
}

impl WorkProfile {
    pub fn total(&self) -> f64 {
        self.f.iter().sum()
    }
}

/// Exact evaluator: the list of routing subsets and the joint law of the
/// `d` routed service times, reused across many states.
#[derive(Debug, Clone)]
pub struct ExactKernel {
    k: usize,
    d: usize,
    subsets: Vec<Vec<usize>>,
    law: Vec<(Vec<u64>, f64)>,
}

impl ExactKernel {
    pub fn new(spec: &ServiceSpec, k: usize, d: usize, support_cap: u128) -> Result<Self, BoundsError> {
        check_kd(k, d)?;
        if !spec.is_samplable() {
            return Err(BoundsError::NotEnumerable(spec.kind_name()));
        }
        let n_subsets = binomial(k, d).to_u128().unwrap_or(u128::MAX);
        let law = spec.tuple_law(k, d, support_cap)?;
        let required = n_subsets.saturating_mul(law.len() as u128);
        if required > support_cap {
            return Err(DistError::SupportTooLarge {
                required,
                cap: support_cap,
            }
            .into());
        }
        Ok(Self {
            k,
            d,
            subsets: subsets(k, d),
            law,
        })
    }

    /// `f_i` for every server; `s` may be in any order.
    pub fn profile(&self, s: &[u64]) -> Vec<f64> {
        let mut f = vec![0.0; self.k];
        for g in &self.subsets {
            for (b, p) in &self.law {
                let horizon = g.iter().zip(b).map(|(&j, &bj)| s[j] + bj).min().unwrap();
                for &i in g {
                    f[i] += p * horizon.saturating_sub(s[i]) as f64;
                }
            }
        }
        let n = self.subsets.len() as f64;
        f.iter_mut().for_each(|x| *x /= n);
        f
    }

    /// `sum_i f_i(s)`.
    pub fn total(&self, s: &[u64]) -> f64 {
        let mut acc = 0.0;
        for g in &self.subsets {
            for (b, p) in &self.law {
                let horizon = g.iter().zip(b).map(|(&j, &bj)| s[j] + bj).min().unwrap();
                let w: u64 = g.iter().map(|&i| horizon.saturating_sub(s[i])).sum();
                acc += p * w as f64;
            }
        }
        acc / self.subsets.len() as f64
    }

    pub fn d(&self) -> usize {
        self.d
    }
}

/// All d-subsets of `0..k` in lexicographic order.
pub fn subsets(k: usize, d: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..d).collect();
    loop {
        out.push(cur.clone());
        let mut i = d;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] < k - d + i {
                cur[i] += 1;
                for t in i + 1..d {
                    cur[t] = cur[t - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Monte-Carlo estimate of the per-server incoming work at state `s`.
pub fn mc_profile(spec: &ServiceSpec, s: &[u64], d: usize, samples: u64, seed: u64) -> Result<WorkProfile, BoundsError> {
    let k = s.len();
    check_kd(k, d)?;
    if samples < 2 {
        return Err(BoundsError::InvalidArgs("Monte Carlo needs at least 2 samples".into()));
    }
    let sampler = spec.sampler(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scratch: Vec<usize> = (0..k).collect();
    let mut routing = RoutingDraw::sample_with(&mut rng, d, &mut scratch);
    let mut b = vec![0u64; k];
    let mut a = vec![0.0f64; k];
    let (mut sum, mut sum2) = (vec![0.0; k], vec![0.0; k]);
    let (mut dsum, mut dsum2) = (vec![0.0; k.saturating_sub(1)], vec![0.0; k.saturating_sub(1)]);
    let (mut tsum, mut tsum2) = (0.0, 0.0);
    for _ in 0..samples {
        RoutingDraw::sample_into(&mut rng, d, &mut scratch, routing.servers_mut());
        sampler.sample_routed(&mut rng, routing.servers(), &mut b);
        let g = routing.servers();
        let horizon = g.iter().map(|&j| s[j] + b[j]).min().unwrap();
        a.fill(0.0);
        for &i in g {
            a[i] = horizon.saturating_sub(s[i]) as f64;
        }
        let mut t = 0.0;
        for i in 0..k {
            sum[i] += a[i];
            sum2[i] += a[i] * a[i];
            t += a[i];
            if i + 1 < k {
                let diff = a[i] - a[i + 1];
                dsum[i] += diff;
                dsum2[i] += diff * diff;
            }
        }
        tsum += t;
        tsum2 += t * t;
    }
    let n = samples as f64;
    let se = |s: f64, s2: f64| {
        let mean = s / n;
        ((s2 / n - mean * mean).max(0.0) / (n - 1.0)).sqrt()
    };
    Ok(WorkProfile {
        f: sum.iter().map(|x| x / n).collect(),
        std_error: Some(sum.iter().zip(&sum2).map(|(&a, &b)| se(a, b)).collect()),
        diff_std_error: Some(dsum.iter().zip(&dsum2).map(|(&a, &b)| se(a, b)).collect()),
        total_std_error: Some(se(tsum, tsum2)),
    })
}

/// Expected incoming work per server at state `s` by the requested method.
pub fn work_profile(spec: &ServiceSpec, s: &[u64], d: usize, method: Method) -> Result<WorkProfile, BoundsError> {
    match method {
        Method::Exact { support_cap } => {
            let kernel = ExactKernel::new(spec, s.len(), d, support_cap)?;
            Ok(WorkProfile {
                f: kernel.profile(s),
                std_error: None,
                diff_std_error: None,
                total_std_error: None,
            })
        }
        Method::MonteCarlo { samples, seed } => mc_profile(spec, s, d, samples, seed),
    }
}

/// `sum_i E[1_i min_{j in G_d}[B_j + delta_{i,j}]^+]`: the expected work one
/// arrival brings when the ordered workloads have gaps `delta`.
pub fn expected_incoming_work(
    delta: &GapVector,
    spec: &ServiceSpec,
    k: usize,
    d: usize,
    method: Method,
) -> Result<Estimate, BoundsError> {
    check_kd(k, d)?;
    if delta.delta().len() != k - 1 {
        return Err(BoundsError::InvalidGap(format!("expected {} gaps", k - 1)));
    }
    let s = delta.ordered_state();
    let p = work_profile(spec, &s, d, method)?;
    Ok(Estimate {
        value: p.total(),
        std_error: p.total_std_error,
    })
}

/// Outcome of the gap-grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaMEstimate {
    /// `K / max_delta expected_incoming_work(delta)`.
    pub value: f64,
    /// The maximal expected incoming work over the grid.
    pub max_work: f64,
    pub argmax: GapVector,
    pub method: String,
    /// Delta-method standard error of `value` (Monte Carlo only).
    pub std_error: Option<f64>,
    pub cells: u128,
}

/// Searches the saturated gap grid `{0..B_max}^(K-d)` for the largest
/// expected incoming work.
pub fn lambda_m_search(
    spec: &ServiceSpec,
    k: usize,
    d: usize,
    method: Method,
    grid_cell_cap: u128,
) -> Result<LambdaMEstimate, BoundsError> {
    check_kd(k, d)?;
    let b_max = spec.max_support().ok_or(BoundsError::NotEnumerable(spec.kind_name()))?;
    let free = k - d;
    let base = b_max as u128 + 1;
    let cells = base.checked_pow(free as u32).unwrap_or(u128::MAX);
    if cells > grid_cell_cap {
        return Err(BoundsError::GridTooLarge {
            required: cells,
            cap: grid_cell_cap,
        });
    }
    let decode = |mut idx: u128| -> Vec<u64> {
        let mut delta = vec![0u64; k - 1];
        for slot in delta.iter_mut().take(free) {
            *slot = (idx % base) as u64;
            idx /= base;
        }
        delta
    };
    let state_of = |delta: &[u64]| -> Vec<u64> {
        let mut s = vec![0u64; k];
        for i in 1..k {
            s[i] = s[i - 1] + delta[i - 1];
        }
        s
    };

    // (work, se, cell): larger work wins, ties go to the smaller cell index.
    let pick = |a: (f64, Option<f64>, u128), b: (f64, Option<f64>, u128)| {
        if b.0 > a.0 || (b.0 == a.0 && b.2 < a.2) {
            b
        } else {
            a
        }
    };
    let (work, se, cell) = match method {
        Method::Exact { support_cap } => {
            let kernel = ExactKernel::new(spec, k, d, support_cap)?;
            (0..cells as u64)
                .into_par_iter()
                .map(|c| (kernel.total(&state_of(&decode(c as u128))), None, c as u128))
                .reduce(|| (f64::NEG_INFINITY, None, u128::MAX), pick)
        }
        Method::MonteCarlo { samples, seed } => {
            if !spec.is_samplable() {
                return Err(DistError::NotSamplable.into());
            }
            let results: Result<Vec<_>, BoundsError> = (0..cells as u64)
                .into_par_iter()
                .map(|c| {
                    let p = mc_profile(spec, &state_of(&decode(c as u128)), d, samples, cell_seed(seed, c, 0))?;
                    Ok((p.total(), p.total_std_error, c as u128))
                })
                .collect();
            results?
                .into_iter()
                .fold((f64::NEG_INFINITY, None, u128::MAX), pick)
        }
    };
    let value = k as f64 / work;
    Ok(LambdaMEstimate {
        value,
        max_work: work,
        argmax: GapVector::new(decode(cell), k, d)?,
        method: method.name().to_string(),
        std_error: se.map(|s| k as f64 * s / (work * work)),
        cells,
    })
}

/// Result of checking that expected incoming work is non-increasing along
/// the ordered servers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneCheck {
    pub profile: WorkProfile,
    pub monotone: bool,
    /// First `i` with `f_i < f_{i+1}` beyond tolerance, if any.
    pub first_violation: Option<usize>,
}

/// Checks `f_1(s) >= ... >= f_K(s)` for an ordered state, exactly or within
/// three standard errors of the paired differences.
pub fn monotone_fi_check(s: &[u64], spec: &ServiceSpec, d: usize, method: Method) -> Result<MonotoneCheck, BoundsError> {
    ensure_ordered(s)?;
    let profile = work_profile(spec, s, d, method)?;
    let first_violation = (0..s.len().saturating_sub(1)).find(|&i| {
        let diff = profile.f[i] - profile.f[i + 1];
        let slack = match &profile.diff_std_error {
            Some(se) => 3.0 * se[i],
            None => 1e-9 * profile.f[i].abs().max(1.0),
        };
        diff < -slack
    });
    Ok(MonotoneCheck {
        monotone: first_violation.is_none(),
        first_violation,
        profile,
    })
}

/// Everything the `bounds` command reports for one `(K, d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    pub service_kind: String,
    /// `P_0..P_d` as floats.
    pub p_m: Vec<f64>,
    /// `P_0..P_d` as reduced fractions.
    pub p_m_exact: Vec<String>,
    /// `g[1..d]`.
    pub min_moments: Vec<f64>,
    pub lambda_lb: f64,
    pub known_bound: f64,
    pub best_bound: f64,
    pub time_scaling_ok: bool,
    pub lambda_m: Option<LambdaMEstimate>,
}

impl BoundReport {
    pub fn build(spec: &ServiceSpec, k: usize, d: usize) -> Result<Self, BoundsError> {
        check_kd(k, d)?;
        let g = spec.min_moment_profile(d)?;
        let p_m = overlap_table(k, d)?;
        let p_m_exact = (0..=d)
            .map(|m| overlap_prob_exact(k, d, m).map(|r| r.to_string()))
            .collect::<Result<_, _>>()?;
        let lambda_lb = lambda_lb(k, d, &g)?;
        let known = known_bound(g[d - 1]);
        Ok(Self {
            k,
            d,
            service_kind: spec.kind_name().to_string(),
            p_m,
            p_m_exact,
            min_moments: g,
            lambda_lb,
            known_bound: known,
            best_bound: lambda_lb.max(known),
            time_scaling_ok: time_scaling_check(spec, k, d),
            lambda_m: None,
        })
    }

    pub fn with_lambda_m(mut self, est: LambdaMEstimate) -> Self {
        self.lambda_m = Some(est);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Pmf;
    use proptest::prelude::*;

    fn two_point(alpha: u64, beta: u64, p: f64) -> ServiceSpec {
        ServiceSpec::iid(Pmf::two_point(alpha, p, beta).unwrap())
    }

    fn two_point_10_100() -> ServiceSpec {
        two_point(10, 100, 0.9)
    }

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    /// P_m by counting d-subsets against the fixed top set {k-d..k-1}.
    fn overlap_by_enumeration(k: usize, d: usize) -> Vec<BigRational> {
        let all = subsets(k, d);
        let mut counts = vec![0i64; d + 1];
        for g in &all {
            counts[g.iter().filter(|&&i| i >= k - d).count()] += 1;
        }
        counts.into_iter().map(|c| rat(c, all.len() as i64)).collect()
    }

    /// Direct transcription of the defining sum for one state, with no
    /// horizon shortcut: `min_j [b_j + s_j - s_i]^+` over every subset and
    /// every point of the product law.
    fn brute_total(s: &[u64], d: usize, pts: &[(u64, f64)]) -> f64 {
        let k = s.len();
        let all = subsets(k, d);
        let mut acc = 0.0;
        for g in &all {
            let mut idx = vec![0usize; d];
            loop {
                let p: f64 = idx.iter().map(|&t| pts[t].1).product();
                for &i in g {
                    let w = g
                        .iter()
                        .zip(&idx)
                        .map(|(&j, &t)| (pts[t].0 as i64 + s[j] as i64 - s[i] as i64).max(0))
                        .min()
                        .unwrap();
                    acc += p * w as f64;
                }
                let mut pos = d;
                let mut more = false;
                while pos > 0 {
                    pos -= 1;
                    idx[pos] += 1;
                    if idx[pos] < pts.len() {
                        more = true;
                        break;
                    }
                    idx[pos] = 0;
                }
                if !more {
                    break;
                }
            }
        }
        acc / all.len() as f64
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(overlap_prob_exact(3, 2, 0).unwrap(), rat(0, 1));
        assert_eq!(overlap_prob_exact(3, 2, 1).unwrap(), rat(2, 3));
        assert_eq!(overlap_prob_exact(3, 2, 2).unwrap(), rat(1, 3));
        assert_eq!(overlap_prob_exact(5, 2, 2).unwrap(), rat(1, 10));
        for k in 1..8 {
            assert_eq!(overlap_prob_exact(k, k, k).unwrap(), rat(1, 1));
            for m in 0..k {
                assert!(overlap_prob_exact(k, k, m).unwrap().is_zero());
            }
        }
        let table: Vec<_> = (0..=2).map(|m| overlap_prob_exact(10, 2, m).unwrap()).collect();
        assert_eq!(table, overlap_by_enumeration(10, 2));
        assert_eq!(table, vec![rat(28, 45), rat(16, 45), rat(1, 45)]);
    }

    #[test]
    fn overlap_matches_enumeration() {
        for k in 1..=9 {
            for d in 1..=k {
                let exact: Vec<_> = (0..=d).map(|m| overlap_prob_exact(k, d, m).unwrap()).collect();
                assert_eq!(exact, overlap_by_enumeration(k, d), "K={k} d={d}");
            }
        }
    }

    #[test]
    fn overlap_sums_to_one() {
        for k in 1..=30 {
            for d in 1..=k {
                let total = (0..=d).fold(BigRational::zero(), |acc, m| acc + overlap_prob_exact(k, d, m).unwrap());
                assert!(total.is_one(), "K={k} d={d}");
            }
        }
    }

    #[test]
    fn overlap_argument_errors() {
        assert!(overlap_prob(3, 4, 0).is_err());
        assert!(overlap_prob(3, 2, 3).is_err());
        assert!(overlap_prob(3, 0, 0).is_err());
    }

    #[test]
    fn lambda_lb_examples() {
        let spec = two_point_10_100();
        let g3 = spec.min_moment_profile(2).unwrap();
        let v = lambda_lb(3, 2, &g3).unwrap();
        assert!((v - 9.0 / 81.6).abs() < 1e-12);
        let v = lambda_lb(10, 2, &g3).unwrap();
        let expected = 10.0 / ((44.0 / 45.0) * 19.0 + (46.0 / 45.0) * 10.9);
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.33647).abs() < 1e-5);
        let g1 = spec.min_moment_profile(1).unwrap();
        assert!((lambda_lb(10, 1, &g1).unwrap() - 10.0 / 19.0).abs() < 1e-12);
        let g10 = spec.min_moment_profile(10).unwrap();
        assert!((lambda_lb(10, 10, &g10).unwrap() - 1.0 / g10[9]).abs() < 1e-12);
    }

    #[test]
    fn lambda_lb_rejects_bad_profiles() {
        assert!(lambda_lb(3, 2, &[1.0, 2.0]).is_err());
        assert!(lambda_lb(3, 2, &[1.0]).is_err());
        assert!(lambda_lb(3, 2, &[1.0, -1.0]).is_err());
    }

    #[test]
    fn lambda_lb_d2_examples() {
        let m2 = 3.0;
        assert!(lambda_lb_d2(5, 4.0 * m2, m2).unwrap() > 1.0 / m2);
        assert!(lambda_lb_d2(3, 4.0 * m2, m2).unwrap() < 1.0 / m2);
        assert!((lambda_lb_d2(2, 7.0, m2).unwrap() - 1.0 / m2).abs() < 1e-15);
        assert!(lambda_lb_d2(3, 1.0, 2.0).is_err());
    }

    #[test]
    fn known_bound_examples() {
        let spec = two_point_10_100();
        assert!((known_bound(spec.min_moment(2).unwrap()) - 1.0 / 10.9).abs() < 1e-15);
        assert!((known_bound(spec.min_moment(10).unwrap()) - 0.1).abs() < 1e-9);
        assert_eq!(known_bound(1.0), 1.0);
    }

    #[test]
    fn gap_vector_validation() {
        assert!(GapVector::new(vec![3, 0], 3, 2).is_ok());
        assert!(GapVector::new(vec![3, 1], 3, 2).is_err());
        assert!(GapVector::new(vec![3], 3, 2).is_err());
        let g = GapVector::new(vec![2, 5, 0, 0], 5, 3).unwrap();
        assert_eq!(g.ordered_state(), vec![0, 2, 7, 7, 7]);
        assert_eq!(g.cumulative(0, 2), 7);
        assert_eq!(g.cumulative(2, 0), -7);
        assert_eq!(GapVector::from_state(&[4, 6, 11, 11, 11], 3).unwrap(), g);
        assert!(GapVector::from_state(&[4, 3, 11], 2).is_err());
    }

    #[test]
    fn zero_gaps_give_d_times_min_moment() {
        let spec = two_point_10_100();
        let e = expected_incoming_work(&GapVector::zeros(10), &spec, 10, 2, Method::exact()).unwrap();
        assert!((e.value - 21.8).abs() < 1e-12);
        for d in 1..=4 {
            let e = expected_incoming_work(&GapVector::zeros(5), &spec, 5, d, Method::exact()).unwrap();
            assert!((e.value - d as f64 * spec.min_moment(d).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn saturated_gap_k3() {
        let spec = two_point_10_100();
        let expected = (2.0 / 3.0) * 19.0 + (2.0 / 3.0) * 10.9;
        for gap in [100, 101, 250] {
            let delta = GapVector::new(vec![gap, 0], 3, 2).unwrap();
            let e = expected_incoming_work(&delta, &spec, 3, 2, Method::exact()).unwrap();
            assert!((e.value - expected).abs() < 1e-12, "gap {gap}: {}", e.value);
        }
    }

    #[test]
    fn exact_matches_brute_force_definition() {
        let pts = [(3u64, 0.25), (8, 0.5), (13, 0.25)];
        let spec = ServiceSpec::iid(Pmf::new(pts).unwrap());
        for s in [vec![0, 0, 0, 0], vec![0, 2, 9, 9], vec![0, 5, 5, 5], vec![0, 1, 2, 20]] {
            for d in 1..=3 {
                if !crate::model::top_d_equal(&s, d) {
                    continue;
                }
                let delta = GapVector::from_state(&s, d).unwrap();
                let e = expected_incoming_work(&delta, &spec, 4, d, Method::exact()).unwrap();
                let b = brute_total(&s, d, &pts);
                assert!((e.value - b).abs() < 1e-12, "s={s:?} d={d}");
            }
        }
    }

    #[test]
    fn mc_matches_exact() {
        let spec = two_point_10_100();
        let delta = GapVector::new(vec![7, 30, 4, 0], 5, 2).unwrap();
        let exact = expected_incoming_work(&delta, &spec, 5, 2, Method::exact()).unwrap();
        let mc = expected_incoming_work(&delta, &spec, 5, 2, Method::MonteCarlo { samples: 200_000, seed: 1 }).unwrap();
        let se = mc.std_error.unwrap();
        assert!((mc.value - exact.value).abs() < 4.0 * se, "{} vs {} (se {se})", mc.value, exact.value);
    }

    #[test]
    fn exact_on_profile_is_refused() {
        let spec = ServiceSpec::profile(vec![5.0, 4.0]).unwrap();
        let r = expected_incoming_work(&GapVector::zeros(3), &spec, 3, 2, Method::exact());
        assert!(matches!(r, Err(BoundsError::NotEnumerable(_))));
        assert!(matches!(
            lambda_m_search(&spec, 3, 2, Method::exact(), DEFAULT_GRID_CELL_CAP),
            Err(BoundsError::NotEnumerable(_))
        ));
    }

    #[test]
    fn lambda_m_full_redundancy() {
        let spec = two_point(12, 40, 0.7);
        let est = lambda_m_search(&spec, 2, 2, Method::exact(), DEFAULT_GRID_CELL_CAP).unwrap();
        assert_eq!(est.cells, 1);
        assert!((est.value - 1.0 / spec.min_moment(2).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn lambda_m_no_replication() {
        let spec = two_point(10, 100, 0.9);
        for k in 1..=4 {
            let est = lambda_m_search(&spec, k, 1, Method::exact(), DEFAULT_GRID_CELL_CAP).unwrap();
            assert!((est.value - k as f64 / 19.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_m_k3_bracket() {
        let spec = two_point_10_100();
        let est = lambda_m_search(&spec, 3, 2, Method::exact(), DEFAULT_GRID_CELL_CAP).unwrap();
        assert_eq!(est.cells, 101);
        let lb = lambda_lb(3, 2, &spec.min_moment_profile(2).unwrap()).unwrap();
        assert!(est.value >= lb - 1e-12);
        assert!(est.value <= 3.0 / (2.0 * 10.9) + 1e-12);
    }

    #[test]
    fn lambda_m_grid_cap_refusal() {
        let spec = two_point_10_100();
        match lambda_m_search(&spec, 6, 2, Method::exact(), 1000) {
            Err(BoundsError::GridTooLarge { required, cap }) => {
                assert_eq!(required, 101u128.pow(4));
                assert_eq!(cap, 1000);
            }
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn monotone_examples() {
        let spec = two_point_10_100();
        let flat = monotone_fi_check(&[0, 0, 0], &spec, 2, Method::exact()).unwrap();
        assert!(flat.monotone);
        assert!(flat.profile.f.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));

        let c = monotone_fi_check(&[0, 5, 5], &spec, 2, Method::exact()).unwrap();
        assert!(c.monotone);
        let f = &c.profile.f;
        assert!(f[0] >= f[1] && (f[1] - f[2]).abs() < 1e-12);

        assert!(matches!(
            monotone_fi_check(&[5, 0, 0], &spec, 2, Method::exact()),
            Err(BoundsError::UnorderedState(_))
        ));
    }

    #[test]
    fn report_for_k3() {
        let r = BoundReport::build(&two_point_10_100(), 3, 2).unwrap();
        assert_eq!(r.p_m_exact, vec!["0", "2/3", "1/3"]);
        assert!((r.lambda_lb - 0.110294).abs() < 1e-6);
        assert!((r.known_bound - 0.0917431).abs() < 1e-6);
        assert_eq!(r.best_bound, r.lambda_lb);
        assert!(r.time_scaling_ok);
    }

    fn small_law() -> impl Strategy<Value = Vec<(u64, f64)>> {
        prop::collection::btree_map(1u64..12, 1u32..20, 1..=3).prop_map(|m| {
            let total: u32 = m.values().sum();
            let mut pts: Vec<(u64, f64)> = m.into_iter().map(|(v, w)| (v, w as f64 / total as f64)).collect();
            let rest: f64 = pts[1..].iter().map(|p| p.1).sum();
            pts[0].1 = 1.0 - rest;
            pts
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn d2_specialization_agrees(k in 2usize..40, m2 in 0.1f64..100.0, ratio in 1.0f64..10.0) {
            let m1 = m2 * ratio;
            let a = lambda_lb(k, 2, &[m1, m2]).unwrap();
            let b = lambda_lb_d2(k, m1, m2).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn closed_form_dominates_every_gap(
            pts in small_law(),
            gaps in prop::collection::vec(0u64..15, 3),
            d in 1usize..=3,
        ) {
            let k = 4;
            let spec = ServiceSpec::iid(Pmf::new(pts).unwrap());
            let mut delta = gaps.clone();
            for x in delta.iter_mut().skip(k - d) { *x = 0; }
            let delta = GapVector::new(delta, k, d).unwrap();
            let work = expected_incoming_work(&delta, &spec, k, d, Method::exact()).unwrap().value;
            let bound = incoming_work_bound(k, d, &spec.min_moment_profile(d).unwrap()).unwrap();
            prop_assert!(work <= bound + 1e-9, "work {} > bound {}", work, bound);
            prop_assert!(work >= spec.min_moment(d).unwrap() - 1e-9);
        }

        #[test]
        fn saturation_is_exact(
            pts in small_law(),
            gaps in prop::collection::vec(0u64..40, 3),
        ) {
            let (k, d) = (5, 2);
            let spec = ServiceSpec::iid(Pmf::new(pts).unwrap());
            let mut raw = gaps.clone();
            raw.push(0);
            let delta = GapVector::new(raw, k, d).unwrap();
            let capped = delta.saturated(spec.max_support().unwrap());
            let a = expected_incoming_work(&delta, &spec, k, d, Method::exact()).unwrap().value;
            let b = expected_incoming_work(&capped, &spec, k, d, Method::exact()).unwrap().value;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn ordered_profiles_are_monotone(
            pts in small_law(),
            gaps in prop::collection::vec(0u64..15, 4),
            d in 1usize..=3,
        ) {
            let k = 5;
            let spec = ServiceSpec::iid(Pmf::new(pts).unwrap());
            let mut delta = gaps.clone();
            for x in delta.iter_mut().skip(k - d) { *x = 0; }
            let s = GapVector::new(delta, k, d).unwrap().ordered_state();
            prop_assert!(monotone_fi_check(&s, &spec, d, Method::exact()).unwrap().monotone);
        }
    }
}
