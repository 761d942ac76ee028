//! Error type shared by the analytic and sampling halves of the crate.

use thiserror::Error;

/// Errors surfaced by kernel construction, saddle solving, prediction,
/// sampling, and the file formats.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A dimension, geometry, or hyperparameter failed validation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A matrix factorization failed even after jitter escalation.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The sampler produced a non-finite loss or gradient.
    #[error("divergent chain at step {step}: {what}")]
    Divergence { step: usize, what: String },

    /// A cache or record file is malformed.
    #[error("format error in {path}: {what}")]
    Format { path: String, what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        CoreError::Numerical(msg.into())
    }

    pub fn format(path: impl Into<String>, what: impl Into<String>) -> Self {
        CoreError::Format {
            path: path.into(),
            what: what.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
