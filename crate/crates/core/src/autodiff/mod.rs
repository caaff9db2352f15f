//! Dense `f64` tensors with a tape-based reverse-mode differentiator.

mod check;
mod graph;
mod tensor;


pub use check::finite_diff_check;
pub use graph::{Graph, OpKind, Var};
pub use tensor::Tensor;

pub(crate) use tensor::numel;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract error: {0}")]
    Contract(String),
    #[error("input error in {op}: index {index} out of range (< {bound})")]
    Index { op: &'static str, index: usize, bound: usize },
}
