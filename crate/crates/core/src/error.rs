//! Error taxonomy shared by every module in the crate.
//!
//! Each variant names the *kind* of failure so callers (and the CLI's
//! single-line error formatter) can report `kind: detail` without string
//! probing. Messages carry the offending tensor/layer/file name whenever
//! one exists.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch or unsupported rank.
    #[error("shape: {0}")]
    Shape(String),

    /// Non-finite values or inputs outside a function's mathematical domain.
    #[error("domain: {0}")]
    Domain(String),

    /// Index or parameter outside its allowed range.
    #[error("range: {0}")]
    Range(String),

    /// Malformed serialized data (bad magic, truncated payload, manifest lies).
    #[error("format: {0}")]
    Format(String),

    /// Invalid configuration value or combination.
    #[error("config: {0}")]
    Config(String),

    /// Two otherwise-valid objects that cannot be combined (arch mismatch,
    /// different base checksums, gate/decomposition rank disagreement).
    #[error("incompatible: {0}")]
    Incompatible(String),

    /// Structurally degenerate input (all-zero spectrum, empty layer set).
    #[error("degenerate: {0}")]
    Degenerate(String),

    /// Underlying I/O failure.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable lowercase tag for machine-parsable output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Range(_) => "range",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Incompatible(_) => "incompatible",
            Error::Degenerate(_) => "degenerate",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
