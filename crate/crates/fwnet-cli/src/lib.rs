//! Experiment driver for the finite-width Bayesian network library.
//!
//! Everything the `fwnet` binary does lives here so that integration tests
//! can call the same code paths: configuration parsing, versioned CSV
//! persistence, the theory pipeline (kernel, saddle point, predictor), Monte
//! Carlo ensembles, the finite-size scaling and channel-sweep runners, and
//! the invariant verification suite.

pub mod channel_sweep;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod ensemble;
pub mod pipeline;
pub mod scaling;
pub mod verify;

use std::fmt;

use fwnet_core::CoreError;

/// Command-level error with a stable exit-code mapping: 1 for a failed
/// invariant or acceptance check, 2 for configuration and input problems,
/// 3 for numerical failures.
#[derive(Debug)]
pub enum CliError {
    /// A verification or acceptance check failed.
    Check(String),
    /// Bad configuration, malformed input file, or I/O problem.
    Config(String),
    /// A numerical routine failed or a sampler diverged.
    Numerical(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        CliError::Numerical(msg.into())
    }

    pub fn check(msg: impl Into<String>) -> Self {
        CliError::Check(msg.into())
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Check(msg) => write!(f, "check failed: {msg}"),
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Numerical(msg) => write!(f, "numerical error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(err: CoreError) -> Self {
        match err {
            CoreError::Config(msg) => CliError::Config(msg),
            CoreError::Format { .. } => CliError::Config(err.to_string()),
            CoreError::Io(e) => CliError::Config(format!("I/O error: {e}")),
            CoreError::Numerical(msg) => CliError::Numerical(msg),
            CoreError::Divergence { .. } => CliError::Numerical(err.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Config(format!("I/O error: {err}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Tool identity stamped into every output file.
pub fn tool_version() -> String {
    format!("fwnet {}", env!("CARGO_PKG_VERSION"))
}
