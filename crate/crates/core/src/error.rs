//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MilcError {
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor shapes incompatible for an operation.
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// A computation produced or received non-finite values.
    #[error("non-finite values in {0}")]
    NonFinite(String),

    /// Dataset or manifest contents failed validation.
    #[error("data: {0}")]
    Data(String),

    /// On-disk format violation (bad magic, truncation, field mismatch).
    #[error("format: {0}")]
    Format(String),

    /// Experiment configuration rejected.
    #[error("config: {0}")]
    Config(String),

    /// Training-time contract violation (degenerate corpus, missing checkpoint).
    #[error("train: {0}")]
    Train(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl MilcError {
    /// Stable one-word category used by the CLI's machine-parseable error lines.
    pub fn category(&self) -> &'static str {
        match self {
            MilcError::InvalidArgument(_) => "usage",
            MilcError::ShapeMismatch { .. } => "shape",
            MilcError::NonFinite(_) => "numeric",
            MilcError::Data(_) => "data",
            MilcError::Format(_) => "format",
            MilcError::Config(_) => "config",
            MilcError::Train(_) => "train",
            MilcError::Io(_) => "io",
            MilcError::Json(_) => "config",
        }
    }
}

pub type Result<T> = std::result::Result<T, MilcError>;
