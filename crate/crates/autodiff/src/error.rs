use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape {shape:?} does not hold {len} values")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },

    #[error("zero extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),

    #[error("loss node {node} must be scalar, got shape {shape:?}")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
