use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("value {value} outside the tabulated range [{lo}, {hi}]")]
    Range { value: f64, lo: f64, hi: f64 },

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    Solver { iterations: usize, residual: f64 },

    /// `checkpoint` holds the flat parameters with the lowest finite loss seen.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize, checkpoint: Vec<f64> },

    #[error("no training sample routed to any leaf")]
    RoutingDegenerate,

    #[error("integrity error for leaf {leaf}: {reason}")]
    Integrity { leaf: usize, reason: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
