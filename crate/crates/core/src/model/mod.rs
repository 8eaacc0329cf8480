//! The workload Markov chain of an R(d) system with FIFO servers and
//! replica cancellation.
//!
//! All randomness enters through [`SlotInput`], so the recursion in this
//! module and the task-level [`OracleState`] can be driven by identical
//! draws and compared slot by slot.
//!
//! Server indices are zero-based throughout the crate.

mod oracle;

pub use oracle::{JobRecord, OracleState, TaskRecord};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while validating model inputs.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("server index {index} out of range for {k} servers")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("service requirement at position {index} is zero; requirements must be >= 1")]
    ZeroService { index: usize },
    #[error("expected {expected} entries, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("routing set is empty")]
    EmptyRouting,
    #[error("routing set must be strictly increasing: {0:?}")]
    UnsortedRouting(Vec<usize>),
    #[error("invalid replication degree d={d} for k={k} servers")]
    InvalidDegree { k: usize, d: usize },
}

/// Remaining drain time of every server, in slots, plus the slot counter.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorkloadState {
    w: Vec<u64>,
    slot: u64,
}

impl WorkloadState {
    /// The empty system at slot 0.
    pub fn empty(k: usize) -> Self {
        Self {
            w: vec![0; k],
            slot: 0,
        }
    }

    pub fn from_parts(w: Vec<u64>, slot: u64) -> Self {
        Self { w, slot }
    }

    pub fn k(&self) -> usize {
        self.w.len()
    }

    pub fn workloads(&self) -> &[u64] {
        &self.w
    }

    pub fn slot(&self) -> u64 {
        self.slot
    }

    pub fn total(&self) -> u64 {
        self.w.iter().sum()
    }

    pub fn max(&self) -> u64 {
        self.w.iter().copied().max().unwrap_or(0)
    }

    /// `w[j] - w[i]`.
    pub fn gap(&self, i: usize, j: usize) -> i64 {
        self.w[j] as i64 - self.w[i] as i64
    }

    /// Quadratic Lyapunov function `sum_i w_i^2`.
    pub fn lyapunov(&self) -> f64 {
        self.w.iter().map(|&x| (x as f64) * (x as f64)).sum()
    }

    /// One transition of the chain. Pure: the input carries all randomness.
    pub fn step(&self, input: &SlotInput) -> Result<WorkloadState, ModelError> {
        input.validate(self.k())?;
        let mut next = self.clone();
        next.advance(input.arrival());
        Ok(next)
    }

    /// In-place transition without input validation; the simulator hot path.
    ///
    /// For a routed server `w + A = max(w, T)` where `T` is the completion
    /// horizon of the job, so the update is `[max(w, T) - 1]^+` on routed
    /// servers and `[w - 1]^+` elsewhere.
    ///
    /// Returns the arriving job's sojourn in slots (its completion horizon).
    pub fn advance(&mut self, arrival: Option<&Arrival>) -> Option<u64> {
        let sojourn = arrival.map(|a| {
            let (horizon, _) = completion_horizon(&self.w, &a.routing.servers, &a.services);
            for &j in &a.routing.servers {
                if self.w[j] < horizon {
                    self.w[j] = horizon;
                }
            }
            horizon
        });
        for x in &mut self.w {
            *x = x.saturating_sub(1);
        }
        self.slot += 1;
        sojourn
    }
}

/// Earliest slot offset at which any routed replica would finish, and the
/// server that finishes it (smallest index on ties).
pub(crate) fn completion_horizon(w: &[u64], servers: &[usize], b: &[u64]) -> (u64, usize) {
    let mut best = u64::MAX;
    let mut arg = usize::MAX;
    for &j in servers {
        let t = w[j] + b[j];
        if t < best {
            best = t;
            arg = j;
        }
    }
    (best, arg)
}

/// The `d` servers chosen for one job, sorted and distinct.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoutingDraw {
    servers: Vec<usize>,
}

impl RoutingDraw {
    pub fn new(servers: Vec<usize>, k: usize) -> Result<Self, ModelError> {
        if servers.is_empty() {
            return Err(ModelError::EmptyRouting);
        }
        if let Some(&bad) = servers.iter().find(|&&i| i >= k) {
            return Err(ModelError::IndexOutOfRange { index: bad, k });
        }
        if servers.windows(2).any(|p| p[0] >= p[1]) {
            return Err(ModelError::UnsortedRouting(servers));
        }
        Ok(Self { servers })
    }

    /// Uniform draw over all `d`-subsets of `0..k`.
    ///
    /// `scratch` must hold a permutation of `0..k`; it is partially shuffled
    /// in place and may be reused across calls.
    pub fn sample_with<R: rand::Rng + ?Sized>(rng: &mut R, d: usize, scratch: &mut [usize]) -> Self {
        let mut servers = Vec::with_capacity(d);
        Self::sample_into(rng, d, scratch, &mut servers);
        Self { servers }
    }

    pub(crate) fn sample_into<R: rand::Rng + ?Sized>(
        rng: &mut R,
        d: usize,
        scratch: &mut [usize],
        out: &mut Vec<usize>,
    ) {
        let k = scratch.len();
        for i in 0..d {
            let j = rng.random_range(i..k);
            scratch.swap(i, j);
        }
        out.clear();
        out.extend_from_slice(&scratch[..d]);
        out.sort_unstable();
    }

    pub fn sample<R: rand::Rng + ?Sized>(rng: &mut R, k: usize, d: usize) -> Self {
        let mut scratch: Vec<usize> = (0..k).collect();
        Self::sample_with(rng, d, &mut scratch)
    }

    pub fn servers(&self) -> &[usize] {
        &self.servers
    }

    pub fn len(&self) -> usize {
        self.servers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.servers.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.servers.binary_search(&i).is_ok()
    }

    /// Empty buffer for [`sample_into`](Self::sample_into) to fill.
    pub(crate) fn buffer(d: usize) -> Self {
        Self {
            servers: Vec::with_capacity(d),
        }
    }

    pub(crate) fn servers_mut(&mut self) -> &mut Vec<usize> {
        &mut self.servers
    }
}

/// A job arrival: where its replicas go and the service vector drawn for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arrival {
    pub routing: RoutingDraw,
    /// One requirement per server; only routed entries are consumed.
    pub services: Vec<u64>,
}

impl Arrival {
    pub fn new(routing: RoutingDraw, services: Vec<u64>) -> Self {
        Self { routing, services }
    }

    fn validate(&self, k: usize) -> Result<(), ModelError> {
        if self.services.len() != k {
            return Err(ModelError::LengthMismatch {
                expected: k,
                actual: self.services.len(),
            });
        }
        if let Some(&bad) = self.routing.servers.iter().find(|&&i| i >= k) {
            return Err(ModelError::IndexOutOfRange { index: bad, k });
        }
        for &j in &self.routing.servers {
            if self.services[j] == 0 {
                return Err(ModelError::ZeroService { index: j });
            }
        }
        Ok(())
    }
}

/// Everything random about one slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotInput {
    arrival: Option<Arrival>,
}

impl SlotInput {
    pub fn idle() -> Self {
        Self { arrival: None }
    }

    pub fn with_arrival(routing: RoutingDraw, services: Vec<u64>) -> Self {
        Self {
            arrival: Some(Arrival::new(routing, services)),
        }
    }

    pub fn arrival(&self) -> Option<&Arrival> {
        self.arrival.as_ref()
    }

    pub fn has_arrival(&self) -> bool {
        self.arrival.is_some()
    }

    pub fn validate(&self, k: usize) -> Result<(), ModelError> {
        match &self.arrival {
            Some(a) => a.validate(k),
            None => Ok(()),
        }
    }
}

fn check_service_vector(state: &WorkloadState, g: &RoutingDraw, b: &[u64]) -> Result<(), ModelError> {
    let k = state.k();
    if b.len() != k {
        return Err(ModelError::LengthMismatch {
            expected: k,
            actual: b.len(),
        });
    }
    if let Some(&bad) = g.servers.iter().find(|&&i| i >= k) {
        return Err(ModelError::IndexOutOfRange { index: bad, k });
    }
    if let Some(pos) = b.iter().position(|&x| x == 0) {
        return Err(ModelError::ZeroService { index: pos });
    }
    Ok(())
}

/// Work server `i` receives if a job routed to `g` with services `b` arrives
/// now: `min_{j in g} [b_j + w_j - w_i]^+`, or 0 when `i` is not routed.
pub fn incoming_work(state: &WorkloadState, i: usize, g: &RoutingDraw, b: &[u64]) -> Result<u64, ModelError> {
    if i >= state.k() {
        return Err(ModelError::IndexOutOfRange { index: i, k: state.k() });
    }
    check_service_vector(state, g, b)?;
    if !g.contains(i) {
        return Ok(0);
    }
    let work = g
        .servers
        .iter()
        .map(|&j| (b[j] as i64 + state.gap(i, j)).max(0))
        .min()
        .expect("routing set is non-empty");
    Ok(work as u64)
}

/// When a job stops occupying the system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Departure {
    /// Slot at whose end the job departs.
    pub slot: u64,
    /// Server whose replica completes; the others are cancelled.
    pub server: usize,
}

/// Departure of a job arriving at slot `state.slot() + 1`.
pub fn departure_slot(state: &WorkloadState, g: &RoutingDraw, b: &[u64]) -> Result<Departure, ModelError> {
    if g.is_empty() {
        return Err(ModelError::EmptyRouting);
    }
    check_service_vector(state, g, b)?;
    let (horizon, server) = completion_horizon(&state.w, &g.servers, b);
    Ok(Departure {
        slot: state.slot + horizon,
        server,
    })
}

/// True iff the `d` largest workloads are all equal.
pub fn balance_check(state: &WorkloadState, d: usize) -> bool {
    top_d_equal(&state.w, d)
}

pub(crate) fn top_d_equal(w: &[u64], d: usize) -> bool {
    if d <= 1 || w.is_empty() {
        return true;
    }
    let max = w.iter().copied().max().unwrap_or(0);
    w.iter().filter(|&&x| x == max).count() >= d.min(w.len())
}
