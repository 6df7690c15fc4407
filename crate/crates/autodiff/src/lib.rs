//! Minimal dense-tensor engine: eager reverse-mode differentiation over the
//! handful of primitives a small 3-D U-Net and its losses need, plus Adam and
//! a finite-difference gradient checker.

mod adam;
mod error;
mod fpenv;
pub mod functional;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod scalar;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{AutodiffError, Result};
pub use fpenv::FlushSubnormals;
pub use functional::{cosine_similarity, pairwise_cosine};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{eval_with_gradients, Gradients, Graph, NodeId};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
