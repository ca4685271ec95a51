use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CsgError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("non-finite value in `{name}`")]
    NonFinite { name: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CsgError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CsgError::Dimension(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CsgError::Contract(msg.into()))
}
