//! Minimal reverse-mode automatic differentiation over dense `f32` tensors.
//!
//! A [`Graph`] is rebuilt for every training step. Parameters live in a
//! [`ParamStore`] outside the graph; they are copied in with
//! [`Graph::param`] / [`Graph::gather_param`] and receive their gradients
//! when [`Graph::backward`] is called. Reductions accumulate in `f64`.

mod graph;
mod params;
mod tensor;

pub use graph::{softmax_row, Function, Graph, NodeId};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: input {value} is outside the domain")]
    Domain { op: &'static str, value: f32 },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}
