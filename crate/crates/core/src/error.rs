//! Crate-wide error type. Variants map one-to-one onto the CLI's exit-code
//! classes, so every failure keeps its class as it crosses the boundary.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed caller-supplied data (empty waveform, non-finite samples, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A documented precondition between modules was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A required file or checkpoint record is missing.
    #[error("missing input: {0}")]
    MissingInput(String),

    /// Parse or format errors in manifests, alignments, caches or checkpoints.
    #[error("format error: {0}")]
    Format(String),

    /// Failure of an external plug-in (e.g. the semantic-embedder subprocess).
    #[error("external dependency: {0}")]
    External(String),

    /// Non-finite loss or other numeric breakdown; carries the diagnostics
    /// snapshot mandated by the training NaN policy.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        Error::MissingInput(msg.into())
    }
}
