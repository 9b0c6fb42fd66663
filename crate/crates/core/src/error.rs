use std::io;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("environment protocol misuse: {0}")]
    Protocol(String),
    #[error("unknown behavior policy `{0}`")]
    UnknownBehavior(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("iteration cap of {0} exceeded")]
    IterationCap(usize),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
