//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A function argument violated its documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor shapes are inconsistent with the operation's contract.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Configuration failed validation; the message lists every offending key.
    #[error("config error: {0}")]
    Config(String),

    /// A computation produced NaN or infinity where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training aborted (e.g. NaN loss); the message carries a diagnostic dump.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A pretraining phase missed its accuracy target within its step budget.
    #[error("did not converge: {0}")]
    NotConverged(String),

    /// Malformed external data (PGM header, manifest line, checkpoint meta).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Autograd(#[from] autograd::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
