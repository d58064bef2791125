use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("{op}: input outside the primitive's domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("shape {shape:?} does not hold {len} values")]
    BadLayout { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("function returned a non-finite value ({0}) while probing")]
    NonFinite(f64),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
