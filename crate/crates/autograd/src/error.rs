use thiserror::Error;

/// Errors surfaced by tensor construction, graph building, and checkpoint IO.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("duplicate parameter name: {0}")]
    DuplicateParameter(String),
    #[error("unknown parameter: {0}")]
    UnknownParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
