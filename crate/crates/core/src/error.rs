use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate point set: {0}")]
    DegeneratePointSet(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("factorization of the regularized Gram matrix failed (n = {n}, lambda = {lambda:e}, diagonal range [{min_diag:e}, {max_diag:e}])")]
    Factorization {
        n: usize,
        lambda: f64,
        min_diag: f64,
        max_diag: f64,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("action space is not enumerable: {0}")]
    NotEnumerable(String),

    #[error("unsupported action for this policy: {0}")]
    UnsupportedAction(String),

    #[error("malformed input at line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    /// True for errors caused by the numerical pipeline rather than by the
    /// caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Factorization { .. } | Error::Numerical(_) | Error::NonFinite(_)
        )
    }
}
