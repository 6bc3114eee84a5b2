//! Error type shared by every stage of the estimation pipeline.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HdBlpError>;

#[derive(Debug, Error)]
pub enum HdBlpError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid shares: {0}")]
    InvalidShares(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("share inversion did not converge after {iterations} iterations (residual {residual:e})")]
    InversionFailed { iterations: usize, residual: f64 },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl HdBlpError {
    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        HdBlpError::DimensionMismatch {
            what,
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HdBlpError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        HdBlpError::Csv {
            path: path.into(),
            source,
        }
    }
}
