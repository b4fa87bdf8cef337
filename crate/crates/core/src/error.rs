use thiserror::Error;

/// Errors raised by the filtering library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("family mismatch: expected {expected}, got {got}")]
    FamilyMismatch { expected: String, got: String },
    #[error("outside support: {0}")]
    Support(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("variational update failed: {message}")]
    UpdateFailed { message: String, last_valid: Vec<f64> },
    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
