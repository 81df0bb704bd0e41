use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the decoding pipeline.
#[derive(Debug, Error)]
pub enum AadError {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("degenerate correlation: {0}")]
    DegenerateCorrelation(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("alignment failed: {0}")]
    Alignment(String),

    #[error("degenerate classifier: {0}")]
    DegenerateClassifier(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("invalid model state: {0}")]
    State(String),

    #[error("tuning failed: {0}")]
    Tuning(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, AadError>;

impl AadError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        AadError::Parameter(msg.into())
    }

    pub(crate) fn ingestion(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        AadError::Ingestion { path: path.into(), message: message.to_string() }
    }
}
