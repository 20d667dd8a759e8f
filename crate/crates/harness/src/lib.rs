//! Experiment runner: configuration, seed derivation, orchestration and
//! telemetry output for online test-time-training poisoning runs.

pub mod config;
pub mod error;
pub mod report;
pub mod runner;
pub mod seeds;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use report::emit_plot;
pub use runner::{run_experiment, RunArtifacts};
