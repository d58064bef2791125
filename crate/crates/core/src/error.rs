use slicer_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SlicerError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("shape mismatch in {context}: {detail}")]
    Shape {
        context: &'static str,
        detail: String,
    },

    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("{0}")]
    InvalidInput(String),

    #[error("mix queue is empty")]
    EmptyQueue,

    #[error("{format} file: {detail}")]
    Format {
        format: &'static str,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SlicerError {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        SlicerError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(format: &'static str, detail: impl Into<String>) -> Self {
        SlicerError::Format {
            format,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SlicerError>;
