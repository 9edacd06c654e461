use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical integration failed: {0}")]
    IntegrationFailure(String),

    #[error("numerical underflow: {0}")]
    NumericalUnderflow(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("inadmissible parameters: conditional event variance {0:e} is not positive")]
    InadmissibleParams(f64),

    #[error("parameter outside prior support: {0}")]
    OutOfSupport(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("degenerate trace: {0}")]
    DegenerateTrace(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("no survival record for subject `{0}`")]
    Join(String),

    #[error("mismatched replicates: {0}")]
    MismatchedReplicates(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used by the command-line front end to pick an
/// exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::IntegrationFailure(_)
            | Error::NumericalUnderflow(_)
            | Error::InadmissibleParams(_)
            | Error::DegenerateTrace(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
