//! Crate-wide error type, categorized so the CLI can map failures to exit codes.

use thiserror::Error;

/// One variant per failure category named in the module contracts.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Numeric-domain violation (log of a non-positive value, x outside [0,1], ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Out-of-range index (token id, digit, target id).
    #[error("index error: {0}")]
    Index(String),

    /// File container violations: bad magic, version, truncated payload.
    #[error("format error: {0}")]
    Format(String),

    /// Corpus ingestion problems: empty input, corpus shorter than a block.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// Invalid configuration (zero segments, D not divisible by H, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Analysis preconditions not met (too few points, degenerate fit input).
    #[error("analysis error: {0}")]
    Analysis(String),

    /// Fit-domain violations: observed loss at or below the irreducible floor.
    #[error("fit-domain error: {0}")]
    FitDomain(String),

    /// Training aborted (non-finite loss or gradient); diagnostics attached.
    #[error("training error: {0}")]
    Training(String),

    /// Internal consistency violation (stale cache, misaligned state).
    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
