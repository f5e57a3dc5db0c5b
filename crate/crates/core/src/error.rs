use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("class {class}: label column is degenerate ({reason})")]
    DegenerateLabels { class: usize, reason: String },

    #[error("class {class}: h = U^T X y is identically zero, the class carries no signal")]
    DegenerateClass { class: usize },

    #[error("class {class}: evidence undefined at lambda = {lambda:e} (residual term {residual:e} is not positive)")]
    DegenerateFit { class: usize, lambda: f64, residual: f64 },

    #[error("eigendecomposition did not converge for bank '{bank}'")]
    EigenFailure { bank: String },

    #[error("class {class}: lambda optimization did not converge within {iterations} iterations")]
    Unconverged { class: usize, iterations: usize },

    #[error("{path}: format error at byte offset {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bank '{bank}' failed: {message}")]
    BankFailed {
        bank: String,
        message: String,
        numerical: bool,
    },

    #[error("manifest error: {0}")]
    Manifest(String),
}

impl Error {
    /// Numerical failures map to CLI exit code 3, everything else to 2.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateClass { .. }
                | Error::DegenerateFit { .. }
                | Error::EigenFailure { .. }
                | Error::Unconverged { .. }
                | Error::BankFailed { numerical: true, .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
