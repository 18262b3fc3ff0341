//! Error types shared across the crate.

use thiserror::Error;

/// Transport failures of the remote guidance provider. The optimization
/// loops treat all of these as retriable.
#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request to {url} timed out")]
    Timeout { url: String },
    #[error("connection to {url} failed: {msg}")]
    Connect { url: String, msg: String },
    #[error("HTTP status {status} from {url}")]
    Status { url: String, status: u16 },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("tensor dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value at ray {ray}: {msg}")]
    Numerical { ray: usize, msg: String },
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("file format error: {0}")]
    Format(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
