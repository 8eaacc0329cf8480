//! Simulator and stability-bound calculator for Redundancy-d load balancing
//! with FIFO servers and replica cancellation.
//!
//! * [`model`]: the workload recursion and a task-level oracle.
//! * [`distributions`]: exchangeable service-time laws and their min-moments.
//! * [`bounds`]: overlap probabilities, `lambda_lb`, the known bound and the
//!   gap-grid `lambda_m` search.
//! * [`simulator`]: runs, verdicts, sweeps and statistical validations.
//! * [`config`] and [`cli`]: the `rdsim` command line.

pub mod bounds;
pub mod cli;
pub mod config;
pub mod distributions;
pub mod model;
pub mod output;
pub mod seeding;
pub mod simulator;
