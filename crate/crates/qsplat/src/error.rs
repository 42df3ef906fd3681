//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A required element of an input file is missing or malformed.
    #[error("schema error: {0}")]
    Schema(String),

    /// Input bytes could not be decoded.
    #[error("parse error: {0}")]
    Parse(String),

    /// An argument is outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller violated an internal contract (e.g. mismatched lengths).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An estimator was given degenerate data.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// The training loop diverged.
    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
