//! Benchmark harness for the protected telemetry pipeline.
//!
//! [`run_scenario`] launches the IdM, vault, PEPs, broker and agents in one
//! process on loopback ports, runs every producer to completion and writes a
//! [`RunReport`] with raw per-cycle CSV. [`compare_modes`] turns a plain and a
//! secure report into a latency overhead summary, and [`stress_sweep`] repeats
//! a scenario at increasing producer counts.

#![forbid(unsafe_code)]

pub mod compare;
pub mod config;
pub mod plot;
pub mod report;
pub mod scenario;
pub mod stats;
pub mod sweep;
pub mod wiretap;

use thiserror::Error;

pub use compare::{compare_modes, OverheadSummary, MAX_MEDIAN_RATIO};
pub use config::{Ports, ScenarioConfig};
pub use report::RunReport;
pub use scenario::{run_scenario, ScenarioRun, CONSUMER_CODE_IDENTITY};
pub use stats::LatencyStats;
pub use sweep::{stress_sweep, SweepReport};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("setup failed: {0}")]
    SetupFailed(String),
    #[error("agent failed: {0}")]
    Agent(String),
    #[error("comparison invalid: {0}")]
    ComparisonInvalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
