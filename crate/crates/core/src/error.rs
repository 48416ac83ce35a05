//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DacError {
    /// Tensor or layer shapes do not line up. Both shapes are named so the
    /// message is actionable.
    #[error("shape mismatch: {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A caller violated an operation contract (non-scalar loss, even kernel
    /// size, epsilon <= 0, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A search procedure hit its configured cap without reaching the target.
    #[error("target unreachable: {0}")]
    Unreachable(String),

    #[error("malformed data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DacError {
    pub fn shape(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        DacError::ShapeMismatch {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DacError>;
