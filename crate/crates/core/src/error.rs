//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by tokenization, modeling, decoding and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violated a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A lookup (trie walk, table access) failed.
    #[error("lookup failed: {0}")]
    Lookup(String),

    /// An internal structural invariant was violated.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Persisted data does not match the declared configuration.
    #[error("schema error: {0}")]
    Schema(String),

    /// Checkpoint version is not readable by this build.
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    /// A text file failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Training produced a non-finite loss.
    #[error("training error: {0}")]
    Training(String),

    /// A numeric operation left its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
