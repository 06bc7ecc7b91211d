use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A NaN or infinity surfaced in activations, loss or gradients.
    #[error("numeric failure at {context}")]
    NumericFailure { context: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("registry: {0}")]
    Registry(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_input(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn invalid_config(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
