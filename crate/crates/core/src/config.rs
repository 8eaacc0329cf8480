//! TOML configuration for the `rdsim` command line.
//!
//! ```toml
//! [system]
//! K = 10
//! d_list = [1, 2, 3]          # or: d = 2
//! lambda_list = [0.1, 0.2]    # or: lambda = 0.3
//!
//! [service]
//! kind = "iid_finite"         # identical_replicas | joint_finite | moment_profile
//! pmf = [[10, 0.9], [100, 0.1]]
//! # joint_finite:   support = [{ values = [3, 5, 8], prob = 1.0 }]
//! # moment_profile: profile = [30.0, 21.2]   or   scale = 30.0, exponent = 0.5
//!
//! [simulation]
//! slots = 1000000
//! seed = 1
//!
//! [bounds]
//! lambda_m = true
//! method = "exact"
//! ```
//!
//! Unknown keys are rejected, and every value is checked against the
//! preconditions of the module that consumes it when the file is loaded.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{Method, DEFAULT_GRID_CELL_CAP, DEFAULT_SUPPORT_CAP};
use crate::distributions::{Pmf, ServiceSpec};
use crate::simulator::{RunConfig, SweepOptions, DEFAULT_SLOPE_TOL, DEFAULT_STRIDE, DEFAULT_SWEEP_SLOT_BUDGET, DEFAULT_WINDOW_FRACTION};

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "RDSIM_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub system: SystemSection,
    pub service: ServiceSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub bounds: BoundsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_list: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_list: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    IidFinite,
    IdenticalReplicas,
    JointFinite,
    MomentProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointPoint {
    pub values: Vec<u64>,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSection {
    pub kind: ServiceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pmf: Option<Vec<(u64, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<Vec<JointPoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "default_slots")]
    pub slots: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<u64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_stride")]
    pub stride: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_window")]
    pub window_fraction: f64,
    #[serde(default = "default_slope_tol")]
    pub slope_tol: f64,
    #[serde(default = "default_budget")]
    pub slot_budget: u128,
}

fn default_slots() -> u64 {
    1_000_000
}
fn default_seed() -> u64 {
    1
}
fn default_stride() -> u64 {
    DEFAULT_STRIDE
}
fn default_parallelism() -> usize {
    1
}
fn default_window() -> f64 {
    DEFAULT_WINDOW_FRACTION
}
fn default_slope_tol() -> f64 {
    DEFAULT_SLOPE_TOL
}
fn default_budget() -> u128 {
    DEFAULT_SWEEP_SLOT_BUDGET
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            slots: default_slots(),
            burn_in: None,
            seed: default_seed(),
            stride: default_stride(),
            parallelism: default_parallelism(),
            window_fraction: default_window(),
            slope_tol: default_slope_tol(),
            slot_budget: default_budget(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Exact,
    Mc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    #[serde(default)]
    pub lambda_m: bool,
    #[serde(default = "default_method")]
    pub method: MethodName,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: u64,
    #[serde(default = "default_grid_cap")]
    pub grid_cell_cap: u128,
    #[serde(default = "default_support_cap")]
    pub support_cap: u128,
}

fn default_method() -> MethodName {
    MethodName::Exact
}
fn default_mc_samples() -> u64 {
    100_000
}
fn default_grid_cap() -> u128 {
    DEFAULT_GRID_CELL_CAP
}
fn default_support_cap() -> u128 {
    DEFAULT_SUPPORT_CAP
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            lambda_m: false,
            method: default_method(),
            mc_samples: default_mc_samples(),
            grid_cell_cap: default_grid_cap(),
            support_cap: default_support_cap(),
        }
    }
}

impl Default for ConfigFile {
    /// Five servers, `d = 2`, the 10/100 two-point law, light load.
    fn default() -> Self {
        Self {
            system: SystemSection {
                k: 5,
                d: Some(2),
                d_list: None,
                lambda: Some(0.15),
                lambda_list: None,
            },
            service: ServiceSection {
                kind: ServiceKind::IidFinite,
                pmf: Some(vec![(10, 0.9), (100, 0.1)]),
                support: None,
                profile: None,
                scale: None,
                exponent: None,
            },
            simulation: SimulationSection {
                slots: 200_000,
                ..Default::default()
            },
            bounds: BoundsSection::default(),
        }
    }
}

impl ConfigFile {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ConfigFile = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let k = self.system.k;
        if k == 0 {
            return invalid("K must be >= 1");
        }
        if self.system.d.is_some() && self.system.d_list.is_some() {
            return invalid("give either d or d_list, not both");
        }
        if self.system.lambda.is_some() && self.system.lambda_list.is_some() {
            return invalid("give either lambda or lambda_list, not both");
        }
        let ds = self.ds()?;
        if let Some(&bad) = ds.iter().find(|&&d| d == 0 || d > k) {
            return invalid(format!("d = {bad} outside 1..={k}"));
        }
        if let Some(ls) = &self.system.lambda_list {
            if ls.is_empty() {
                return invalid("lambda_list is empty");
            }
        }
        for &l in self.lambdas_unchecked() {
            if !(l > 0.0 && l < 1.0) {
                return invalid(format!("lambda = {l} outside (0, 1)"));
            }
        }
        let spec = self.spec()?;
        if let Some(max) = spec.max_index() {
            if let Some(&bad) = ds.iter().find(|&&d| d > max) {
                return invalid(format!("service law defines min-moments only up to j = {max}, but d = {bad}"));
            }
        }
        if let Some(jk) = spec.fixed_dimension() {
            if jk != k {
                return invalid(format!("joint support vectors have length {jk}, expected K = {k}"));
            }
        }
        let sim = &self.simulation;
        if sim.slots == 0 {
            return invalid("slots must be positive");
        }
        if sim.burn_in.is_some_and(|b| b >= sim.slots) {
            return invalid("burn_in must be below slots");
        }
        if sim.stride == 0 {
            return invalid("stride must be >= 1");
        }
        if sim.parallelism == 0 {
            return invalid("parallelism must be >= 1");
        }
        if !(sim.window_fraction > 0.0 && sim.window_fraction <= 1.0) {
            return invalid("window_fraction must lie in (0, 1]");
        }
        if sim.slope_tol.is_nan() || sim.slope_tol <= 0.0 {
            return invalid("slope_tol must be positive");
        }
        if self.bounds.mc_samples < 2 {
            return invalid("mc_samples must be >= 2");
        }
        Ok(())
    }

    /// Replication degrees, from `d` or `d_list`.
    pub fn ds(&self) -> Result<Vec<usize>, ConfigError> {
        match (&self.system.d, &self.system.d_list) {
            (Some(d), None) => Ok(vec![*d]),
            (None, Some(list)) if !list.is_empty() => Ok(list.clone()),
            (None, Some(_)) => invalid("d_list is empty"),
            _ => invalid("missing d or d_list"),
        }
    }

    fn lambdas_unchecked(&self) -> &[f64] {
        match (&self.system.lambda, &self.system.lambda_list) {
            (Some(l), _) => std::slice::from_ref(l),
            (None, Some(list)) => list,
            (None, None) => &[],
        }
    }

    /// Arrival rates, from `lambda` or `lambda_list`.
    pub fn lambdas(&self) -> Result<Vec<f64>, ConfigError> {
        let ls = self.lambdas_unchecked();
        if ls.is_empty() {
            return invalid("missing lambda or lambda_list");
        }
        Ok(ls.to_vec())
    }

    pub fn spec(&self) -> Result<ServiceSpec, ConfigError> {
        let s = &self.service;
        let unexpected = |field: &str| invalid(format!("field `{field}` does not apply to kind {:?}", s.kind));
        let wrap = |r: Result<ServiceSpec, crate::distributions::DistError>| r.map_err(|e| ConfigError::Invalid(e.to_string()));
        match s.kind {
            ServiceKind::IidFinite | ServiceKind::IdenticalReplicas => {
                if s.support.is_some() {
                    return unexpected("support");
                }
                if s.profile.is_some() || s.scale.is_some() || s.exponent.is_some() {
                    return unexpected("profile/scale/exponent");
                }
                let Some(pairs) = &s.pmf else {
                    return invalid("missing `pmf`");
                };
                let pmf = Pmf::new(pairs.iter().copied()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Ok(if s.kind == ServiceKind::IidFinite {
                    ServiceSpec::iid(pmf)
                } else {
                    ServiceSpec::identical(pmf)
                })
            }
            ServiceKind::JointFinite => {
                if s.pmf.is_some() {
                    return unexpected("pmf");
                }
                if s.profile.is_some() || s.scale.is_some() || s.exponent.is_some() {
                    return unexpected("profile/scale/exponent");
                }
                let Some(support) = &s.support else {
                    return invalid("missing `support`");
                };
                wrap(ServiceSpec::joint(
                    self.system.k,
                    support.iter().map(|p| (p.values.clone(), p.prob)),
                ))
            }
            ServiceKind::MomentProfile => {
                if s.pmf.is_some() || s.support.is_some() {
                    return unexpected("pmf/support");
                }
                match (&s.profile, s.scale, s.exponent) {
                    (Some(p), None, None) => wrap(ServiceSpec::profile(p.clone())),
                    (None, Some(scale), Some(exp)) => wrap(ServiceSpec::power_profile(scale, exp, self.system.k)),
                    _ => invalid("moment_profile needs either `profile` or both `scale` and `exponent`"),
                }
            }
        }
    }

    /// Base run for `(d, lambda)`, with the config's horizon and seed.
    pub fn run_config(&self, d: usize, lambda: f64) -> Result<RunConfig, ConfigError> {
        let sim = &self.simulation;
        let mut rc = RunConfig::new(self.system.k, d, lambda, sim.slots, sim.seed, self.spec()?);
        if let Some(b) = sim.burn_in {
            rc.burn_in = b;
        }
        rc.stride = sim.stride;
        Ok(rc)
    }

    pub fn sweep_options(&self) -> SweepOptions {
        SweepOptions {
            window_fraction: self.simulation.window_fraction,
            slope_tol: self.simulation.slope_tol,
            slot_budget: self.simulation.slot_budget,
        }
    }

    pub fn method(&self) -> Method {
        match self.bounds.method {
            MethodName::Exact => Method::Exact {
                support_cap: self.bounds.support_cap,
            },
            MethodName::Mc => Method::MonteCarlo {
                samples: self.bounds.mc_samples,
                seed: self.simulation.seed,
            },
        }
    }
}
