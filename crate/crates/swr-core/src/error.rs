//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SwrError {
    /// An operation received tensors whose extents do not conform to its
    /// signature. `detail` names the offending extents.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("backward: loss tensor was not produced on this tape")]
    LossNotOnTape,

    #[error("backward: loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("format violation: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training aborted: {0}")]
    Train(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SwrError>;

impl SwrError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        SwrError::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        SwrError::InvalidArgument { op, detail: detail.into() }
    }
}
