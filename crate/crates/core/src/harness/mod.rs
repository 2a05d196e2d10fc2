//! Experiment runner: scenario configuration, closed-loop simulation,
//! solver benchmark, file export and the acceptance checks.

pub mod acceptance;
pub mod bench;
pub mod config;
pub mod export;
pub mod run;

pub use config::{ControllerKind, ScenarioConfig};
pub use run::{compute_metrics, run_closed_loop, Metrics, RunResult, StepRecord, TimingStats};
