//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failures surfaced by the library.
///
/// The split matters for the CLI: `Invalid`, `Parse`, and `Io` are usage
/// errors (exit code 1), while `Numerical` reports a computation that could
/// not be completed at the given inputs (exit code 2).
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed inputs or configuration: dimension mismatches, out-of-range
    /// options, responses outside a family's support, and similar.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A numerical operation failed: rank deficiency, singular or
    /// ill-conditioned systems, degenerate spectra, non-convergence where
    /// convergence is required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A delimited input file could not be parsed. Row and column are
    /// 1-based; row 0 means the failure is not tied to a specific row.
    #[error("parse error at row {row}, column {col}: {detail}")]
    Parse {
        row: usize,
        col: usize,
        detail: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Helper for the common invalid-input case.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Helper for the common numerical-failure case.
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 2,
            _ => 1,
        }
    }
}
