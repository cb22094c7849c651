use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Array shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input violates a mathematical domain requirement (e.g. sqrt of a negative).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// More ground truths than prediction slots, or rows than columns.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A NaN or infinity appeared where a finite number is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed file contents (bad header, truncated payload, invalid annotation).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
