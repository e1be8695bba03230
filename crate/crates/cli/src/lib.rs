//! Experiment runner for the Fed-ADE simulator: JSON configs in, metrics
//! CSVs, per-mode summaries and comparison tables out.

pub mod config;
pub mod error;
pub mod experiment;
pub mod report;

pub use config::{validate_config, ExperimentConfig};
pub use error::{CliError, CliResult};
pub use experiment::{run_experiment, ExperimentOutcome};
