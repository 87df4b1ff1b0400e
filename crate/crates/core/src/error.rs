use thiserror::Error;

pub type Result<T> = std::result::Result<T, MsbError>;

#[derive(Debug, Error)]
pub enum MsbError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("outcome error: {0}")]
    Outcome(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("insufficient events: {0}")]
    InsufficientEvents(String),

    #[error("imputation error: {0}")]
    Imputation(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("undefined metric: {0}")]
    Undefined(String),
}

impl MsbError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MsbError::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        MsbError::Config(msg.into())
    }
}
