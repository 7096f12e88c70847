use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape {shape:?} holds {} elements but data has {len}", shape.iter().product::<usize>())]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("expected a one-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("batchnorm in train mode needs at least 2 rows, got {rows}")]
    BatchTooSmall { rows: usize },

    #[error("{op}: index {index} out of range for axis of size {size}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
}
