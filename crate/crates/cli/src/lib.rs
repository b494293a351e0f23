//! Experiment runner for regression markets: loads a TOML config, assembles
//! the market task, executes honest and attacked runs, and writes ledgers,
//! verdicts, replication curves and a summary as CSV/text artifacts.

pub mod config;
mod runner;

pub use config::{ExperimentConfig, Violation};
pub use runner::{run_experiment, run_replication_sweep, validate_config, Artifacts, Overrides};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Runtime(#[from] regression_markets::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit code: 2 for config errors, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }
}
