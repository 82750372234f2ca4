//! Library half of the `feddq` command-line tool.
//!
//! The binary is a thin clap wrapper over [`commands`]; integration tests
//! drive the same functions directly.

pub mod artifacts;
pub mod commands;
pub mod config;

pub use commands::{cmd_bound, cmd_quantize, cmd_run, BoundSummary, QuantizeStats, SuiteOutcome};
pub use config::ExperimentConfig;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("run diverged: {0}")]
    Diverged(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}
