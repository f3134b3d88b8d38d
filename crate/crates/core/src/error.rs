//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or configuration mismatch (layer arithmetic, architecture grammar, bad options).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (bad labels, truncated files).
    #[error("data error: {0}")]
    Data(String),

    /// Byte-level format violation in a serialized file.
    #[error("format error: {0}")]
    Format(String),

    /// A warp became non-invertible or its perspective denominator vanished.
    #[error("degenerate warp: {0}")]
    DegenerateWarp(String),

    /// Corner/point configuration too degenerate to fit a warp.
    #[error("degenerate configuration: {0}")]
    DegenerateConfig(String),

    /// A linear system was singular or numerically unusable.
    #[error("ill-conditioned system: {0}")]
    IllConditioned(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
