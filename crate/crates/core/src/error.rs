use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },
    #[error("graph is disconnected")]
    Disconnected,
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is indefinite (min eigenvalue {0:e})")]
    Indefinite(f64),
    #[error("diverged at iteration {iteration}: norm {norm:e}")]
    Diverged { iteration: usize, norm: f64 },
    #[error("solver failed: {0}")]
    SolveFailed(String),
    #[error("could not certify: {0}")]
    Certification(String),
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }
}
