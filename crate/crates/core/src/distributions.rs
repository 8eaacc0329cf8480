//! Exchangeable joint laws for the service vector of one job.
//!
//! Four kinds are supported: i.i.d. coordinates over a finite integer pmf,
//! identical replicas (one draw copied to every coordinate), an explicit
//! joint pmf over K-vectors that is symmetrized on construction, and a bare
//! profile of min-moments `g[j] = E[min(B_1..B_j)]` that can feed the bounds
//! but cannot be sampled.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `sum(p) == 1`.
pub const PROB_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("probabilities sum to {0}, expected 1 within 1e-12")]
    NotNormalized(f64),
    #[error("negative or non-finite probability {0}")]
    BadProbability(f64),
    #[error("support value must be >= 1, got {0}")]
    ZeroSupport(u64),
    #[error("empty pmf")]
    Empty,
    #[error("joint support vector has length {actual}, expected {expected}")]
    VectorLength { expected: usize, actual: usize },
    #[error("moment profile must be positive and non-increasing (entry {index} = {value})")]
    BadProfile { index: usize, value: f64 },
    #[error("moment-profile laws cannot be sampled")]
    NotSamplable,
    #[error("law is not enumerable")]
    NotEnumerable,
    #[error("index j={j} out of range 1..={max}")]
    IndexOutOfRange { j: usize, max: usize },
    #[error("only the mean ({mean}) is known for a moment profile")]
    SecondMomentUnavailable { mean: f64 },
    #[error("law needs {k} coordinates but the service vector has {actual}")]
    DimensionMismatch { k: usize, actual: usize },
    #[error("enumerating {required} support points exceeds the cap of {cap}")]
    SupportTooLarge { required: u128, cap: u128 },
}

/// A finite pmf over positive integers, sorted by value with duplicates merged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pmf {
    points: Vec<(u64, f64)>,
}

impl Pmf {
    pub fn new(pairs: impl IntoIterator<Item = (u64, f64)>) -> Result<Self, DistError> {
        let mut merged: BTreeMap<u64, f64> = BTreeMap::new();
        for (v, p) in pairs {
            if !p.is_finite() || p < 0.0 {
                return Err(DistError::BadProbability(p));
            }
            if v == 0 {
                return Err(DistError::ZeroSupport(v));
            }
            *merged.entry(v).or_insert(0.0) += p;
        }
        let total: f64 = merged.values().sum();
        if merged.is_empty() {
            return Err(DistError::Empty);
        }
        if (total - 1.0).abs() > PROB_TOLERANCE {
            return Err(DistError::NotNormalized(total));
        }
        let points: Vec<_> = merged.into_iter().filter(|&(_, p)| p > 0.0).collect();
        if points.is_empty() {
            return Err(DistError::Empty);
        }
        Ok(Self { points })
    }

    /// `value` with probability `p`, `other` with probability `1 - p`.
    pub fn two_point(value: u64, p: f64, other: u64) -> Result<Self, DistError> {
        Self::new([(value, p), (other, 1.0 - p)])
    }

    pub fn degenerate(value: u64) -> Result<Self, DistError> {
        Self::new([(value, 1.0)])
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    pub fn max_value(&self) -> u64 {
        self.points.last().map(|&(v, _)| v).unwrap_or(0)
    }

    pub fn mean(&self) -> f64 {
        self.points.iter().map(|&(v, p)| v as f64 * p).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.points.iter().map(|&(v, p)| (v as f64).powi(2) * p).sum()
    }

    /// `E[min of j iid copies] = sum_{t>=0} P(B > t)^j`, summed exactly over
    /// the constant stretches of the survival function.
    pub fn min_moment_iid(&self, j: usize) -> f64 {
        let mut total = 0.0;
        let mut prev = 0u64;
        let mut survival = 1.0f64;
        for &(v, p) in &self.points {
            // P(B > t) = survival for t in [prev, v)
            total += (v - prev) as f64 * survival.powi(j as i32);
            survival = (survival - p).max(0.0);
            prev = v;
        }
        total
    }
}

/// One symmetrized atom of a joint law: a multiset of K values (sorted) and
/// its total mass, spread evenly over the distinct arrangements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeableAtom {
    pub values: Vec<u64>,
    pub mass: f64,
}

/// Exchangeable law of the task service vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServiceSpec {
    IidFinite { pmf: Pmf },
    IdenticalReplicas { pmf: Pmf },
    JointFinite { k: usize, atoms: Vec<ExchangeableAtom> },
    MomentProfile { profile: Vec<f64> },
}

impl ServiceSpec {
    pub fn iid(pmf: Pmf) -> Self {
        ServiceSpec::IidFinite { pmf }
    }

    pub fn identical(pmf: Pmf) -> Self {
        ServiceSpec::IdenticalReplicas { pmf }
    }

    /// Builds a joint law from an arbitrary pmf over K-vectors. The result is
    /// the average of the input over all coordinate permutations, so it is
    /// exchangeable whatever the input was.
    pub fn joint(k: usize, support: impl IntoIterator<Item = (Vec<u64>, f64)>) -> Result<Self, DistError> {
        let mut by_multiset: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
        let mut total = 0.0;
        for (mut v, p) in support {
            if v.len() != k {
                return Err(DistError::VectorLength {
                    expected: k,
                    actual: v.len(),
                });
            }
            if !p.is_finite() || p < 0.0 {
                return Err(DistError::BadProbability(p));
            }
            if let Some(&z) = v.iter().find(|&&x| x == 0) {
                return Err(DistError::ZeroSupport(z));
            }
            v.sort_unstable();
            *by_multiset.entry(v).or_insert(0.0) += p;
            total += p;
        }
        if by_multiset.is_empty() {
            return Err(DistError::Empty);
        }
        if (total - 1.0).abs() > PROB_TOLERANCE {
            return Err(DistError::NotNormalized(total));
        }
        let atoms = by_multiset
            .into_iter()
            .filter(|&(_, m)| m > 0.0)
            .map(|(values, mass)| ExchangeableAtom { values, mass })
            .collect();
        Ok(ServiceSpec::JointFinite { k, atoms })
    }

    pub fn profile(profile: Vec<f64>) -> Result<Self, DistError> {
        if profile.is_empty() {
            return Err(DistError::Empty);
        }
        let mut prev = f64::INFINITY;
        for (index, &value) in profile.iter().enumerate() {
            if !(value.is_finite() && value > 0.0 && value <= prev) {
                return Err(DistError::BadProfile { index: index + 1, value });
            }
            prev = value;
        }
        Ok(ServiceSpec::MomentProfile { profile })
    }

    /// `g[j] = scale / j^exponent` for `j = 1..=len`.
    pub fn power_profile(scale: f64, exponent: f64, len: usize) -> Result<Self, DistError> {
        Self::profile((1..=len).map(|j| scale / (j as f64).powf(exponent)).collect())
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ServiceSpec::IidFinite { .. } => "iid_finite",
            ServiceSpec::IdenticalReplicas { .. } => "identical_replicas",
            ServiceSpec::JointFinite { .. } => "joint_finite",
            ServiceSpec::MomentProfile { .. } => "moment_profile",
        }
    }

    pub fn is_samplable(&self) -> bool {
        !matches!(self, ServiceSpec::MomentProfile { .. })
    }

    /// Largest service value that can occur; `None` for moment profiles.
    pub fn max_support(&self) -> Option<u64> {
        match self {
            ServiceSpec::IidFinite { pmf } | ServiceSpec::IdenticalReplicas { pmf } => Some(pmf.max_value()),
            ServiceSpec::JointFinite { atoms, .. } => atoms.iter().filter_map(|a| a.values.last().copied()).max(),
            ServiceSpec::MomentProfile { .. } => None,
        }
    }

    /// Number of coordinates the law is defined on, if fixed.
    pub fn fixed_dimension(&self) -> Option<usize> {
        match self {
            ServiceSpec::JointFinite { k, .. } => Some(*k),
            _ => None,
        }
    }

    /// Largest `j` for which `min_moment` is defined, if bounded.
    pub fn max_index(&self) -> Option<usize> {
        match self {
            ServiceSpec::JointFinite { k, .. } => Some(*k),
            ServiceSpec::MomentProfile { profile } => Some(profile.len()),
            _ => None,
        }
    }

    /// Exact `E[min(B_1, ..., B_j)]`.
    pub fn min_moment(&self, j: usize) -> Result<f64, DistError> {
        let max = self.max_index().unwrap_or(usize::MAX);
        if j == 0 || j > max {
            return Err(DistError::IndexOutOfRange { j, max });
        }
        Ok(match self {
            ServiceSpec::IidFinite { pmf } => pmf.min_moment_iid(j),
            ServiceSpec::IdenticalReplicas { pmf } => pmf.mean(),
            ServiceSpec::JointFinite { k, atoms } => {
                // Under a uniform arrangement the first j coordinates are a
                // uniform j-subset of the multiset; the r-th smallest value
                // (1-based) is their minimum with probability C(k-r, j-1)/C(k, j).
                let denom = binom_f64(*k, j);
                atoms
                    .iter()
                    .map(|a| {
                        let e: f64 = a
                            .values
                            .iter()
                            .enumerate()
                            .map(|(r, &x)| x as f64 * binom_f64(*k - r - 1, j - 1))
                            .sum();
                        a.mass * e / denom
                    })
                    .sum()
            }
            ServiceSpec::MomentProfile { profile } => profile[j - 1],
        })
    }

    /// `g[1..=d]`.
    pub fn min_moment_profile(&self, d: usize) -> Result<Vec<f64>, DistError> {
        (1..=d).map(|j| self.min_moment(j)).collect()
    }

    /// Mean and second moment of a single coordinate.
    pub fn moments(&self) -> Result<(f64, f64), DistError> {
        match self {
            ServiceSpec::IidFinite { pmf } | ServiceSpec::IdenticalReplicas { pmf } => {
                Ok((pmf.mean(), pmf.second_moment()))
            }
            ServiceSpec::JointFinite { k, atoms } => {
                let kf = *k as f64;
                let mean = atoms.iter().map(|a| a.mass * a.values.iter().sum::<u64>() as f64 / kf).sum();
                let second = atoms
                    .iter()
                    .map(|a| a.mass * a.values.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / kf)
                    .sum();
                Ok((mean, second))
            }
            ServiceSpec::MomentProfile { profile } => Err(DistError::SecondMomentUnavailable { mean: profile[0] }),
        }
    }

    /// Sampler for service vectors of length `k`.
    pub fn sampler(&self, k: usize) -> Result<ServiceSampler, DistError> {
        let kind = match self {
            ServiceSpec::IidFinite { pmf } => SamplerKind::Iid(PmfSampler::new(pmf)),
            ServiceSpec::IdenticalReplicas { pmf } => SamplerKind::Identical(PmfSampler::new(pmf)),
            ServiceSpec::JointFinite { k: jk, atoms } => {
                if *jk != k {
                    return Err(DistError::DimensionMismatch { k: *jk, actual: k });
                }
                let index = WeightedIndex::new(atoms.iter().map(|a| a.mass)).expect("atoms carry positive mass");
                SamplerKind::Joint {
                    index,
                    atoms: atoms.iter().map(|a| a.values.clone()).collect(),
                }
            }
            ServiceSpec::MomentProfile { .. } => return Err(DistError::NotSamplable),
        };
        Ok(ServiceSampler { k, kind })
    }

    /// One draw of the full service vector.
    pub fn sample_vector<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<u64>, DistError> {
        let sampler = self.sampler(k)?;
        let mut out = vec![0; k];
        sampler.sample_into(rng, &mut out);
        Ok(out)
    }

    /// Joint law of `d` coordinates, as (tuple, probability) pairs with
    /// merged duplicates. Refuses when more than `cap` points would be
    /// generated.
    pub fn tuple_law(&self, k: usize, d: usize, cap: u128) -> Result<Vec<(Vec<u64>, f64)>, DistError> {
        if d == 0 || d > k {
            return Err(DistError::IndexOutOfRange { j: d, max: k });
        }
        let mut law: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
        match self {
            ServiceSpec::IidFinite { pmf } => {
                let n = pmf.points.len() as u128;
                let required = n.checked_pow(d as u32).unwrap_or(u128::MAX);
                if required > cap {
                    return Err(DistError::SupportTooLarge { required, cap });
                }
                let mut idx = vec![0usize; d];
                loop {
                    let tuple: Vec<u64> = idx.iter().map(|&i| pmf.points[i].0).collect();
                    let p: f64 = idx.iter().map(|&i| pmf.points[i].1).product();
                    *law.entry(tuple).or_insert(0.0) += p;
                    if !odometer(&mut idx, pmf.points.len()) {
                        break;
                    }
                }
            }
            ServiceSpec::IdenticalReplicas { pmf } => {
                for &(v, p) in &pmf.points {
                    law.insert(vec![v; d], p);
                }
            }
            ServiceSpec::JointFinite { k: jk, atoms } => {
                if *jk != k {
                    return Err(DistError::DimensionMismatch { k: *jk, actual: k });
                }
                let arrangements: u128 = ((k - d + 1)..=k).map(|x| x as u128).product();
                let required = arrangements.saturating_mul(atoms.len() as u128);
                if required > cap {
                    return Err(DistError::SupportTooLarge { required, cap });
                }
                // Ordered selections of d distinct positions are equally
                // likely under a uniform arrangement of the multiset.
                let weight = 1.0 / arrangements as f64;
                let mut picks = Vec::with_capacity(d);
                for a in atoms {
                    for_each_injection(k, d, &mut picks, &mut |sel| {
                        let tuple: Vec<u64> = sel.iter().map(|&i| a.values[i]).collect();
                        *law.entry(tuple).or_insert(0.0) += a.mass * weight;
                    });
                }
            }
            ServiceSpec::MomentProfile { .. } => return Err(DistError::NotEnumerable),
        }
        Ok(law.into_iter().collect())
    }
}

fn odometer(idx: &mut [usize], base: usize) -> bool {
    for slot in idx.iter_mut().rev() {
        *slot += 1;
        if *slot < base {
            return true;
        }
        *slot = 0;
    }
    false
}

fn for_each_injection(k: usize, d: usize, picks: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
    if picks.len() == d {
        f(picks);
        return;
    }
    for i in 0..k {
        if !picks.contains(&i) {
            picks.push(i);
            for_each_injection(k, d, picks, f);
            picks.pop();
        }
    }
}

fn binom_f64(n: usize, r: usize) -> f64 {
    if r > n {
        return 0.0;
    }
    let r = r.min(n - r);
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Debug, Clone)]
struct PmfSampler {
    values: Vec<u64>,
    index: WeightedIndex<f64>,
}

impl PmfSampler {
    fn new(pmf: &Pmf) -> Self {
        Self {
            values: pmf.points.iter().map(|&(v, _)| v).collect(),
            index: WeightedIndex::new(pmf.points.iter().map(|&(_, p)| p)).expect("pmf has positive mass"),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        self.values[self.index.sample(rng)]
    }
}

#[derive(Debug, Clone)]
enum SamplerKind {
    Iid(PmfSampler),
    Identical(PmfSampler),
    Joint { index: WeightedIndex<f64>, atoms: Vec<Vec<u64>> },
}

/// Draws service vectors of a fixed length.
#[derive(Debug, Clone)]
pub struct ServiceSampler {
    k: usize,
    kind: SamplerKind,
}

impl ServiceSampler {
    pub fn k(&self) -> usize {
        self.k
    }

    /// Fills all `k` coordinates with one draw of the joint law.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [u64]) {
        debug_assert_eq!(out.len(), self.k);
        match &self.kind {
            SamplerKind::Iid(s) => out.iter_mut().for_each(|x| *x = s.draw(rng)),
            SamplerKind::Identical(s) => out.fill(s.draw(rng)),
            SamplerKind::Joint { index, atoms } => {
                let atom = &atoms[index.sample(rng)];
                out.copy_from_slice(atom);
                // Fisher-Yates: a uniform arrangement of the multiset.
                for i in (1..out.len()).rev() {
                    let j = rng.random_range(0..=i);
                    out.swap(i, j);
                }
            }
        }
    }

    /// Like [`sample_into`](Self::sample_into) but only guarantees the
    /// coordinates in `routed`; i.i.d. and identical laws skip the rest.
    pub fn sample_routed<R: Rng + ?Sized>(&self, rng: &mut R, routed: &[usize], out: &mut [u64]) {
        match &self.kind {
            SamplerKind::Iid(s) => routed.iter().for_each(|&j| out[j] = s.draw(rng)),
            SamplerKind::Identical(s) => {
                let v = s.draw(rng);
                routed.iter().for_each(|&j| out[j] = v);
            }
            SamplerKind::Joint { .. } => self.sample_into(rng, out),
        }
    }
}

/// `E[min(B_1..B_d)] > k`: the time-scaling condition that keeps the
/// stability region inside `[0, 1)`.
pub fn time_scaling_check(spec: &ServiceSpec, k: usize, d: usize) -> bool {
    spec.min_moment(d).map(|g| g > k as f64).unwrap_or(false)
}
