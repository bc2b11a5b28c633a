use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MoanError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MoanError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("training diverged at {phase} step {step}: {detail}")]
    Diverged {
        phase: String,
        step: usize,
        detail: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid artifact {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl MoanError {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, got: usize) -> Self {
        MoanError::Dimension {
            context: context.into(),
            expected,
            got,
        }
    }
}
