//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DipsError {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("normalization statistics missing or malformed: {0}")]
    MissingStats(String),

    #[error("task fingerprint mismatch: {context} (expected {expected}, got {actual})")]
    FingerprintMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, DipsError>;
