use thiserror::Error;

/// Errors raised by the numerical kernels, solvers and model routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MmtrError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue:.3e})")]
    NotPsd { eigenvalue: f64 },

    #[error("row {row} has (numerically) zero norm")]
    ZeroRow { row: usize },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("residual scale collapsed to {tau:.3e}: the response is interpolated exactly")]
    DegenerateResidual { tau: f64 },

    #[error("truth has zero Frobenius norm")]
    ZeroTruth,

    #[error("group `{0}` is not present in the training data")]
    UnknownGroup(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for MmtrError {
    fn from(e: std::io::Error) -> Self {
        MmtrError::Io(e.to_string())
    }
}

impl From<csv::Error> for MmtrError {
    fn from(e: csv::Error) -> Self {
        MmtrError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, MmtrError>;
