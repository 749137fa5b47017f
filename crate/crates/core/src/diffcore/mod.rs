//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! [`Graph`] records primitives in topological order and evaluates them
//! eagerly; [`Graph::backward`] sweeps the tape in reverse. Composite ops the
//! model leans on (LSTM gate nonlinearity, additive attention) are fused
//! primitives with hand-written adjoints, each covered by [`gradient_check`].

mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use gradcheck::{check_graph, gradient_check};
pub use graph::{Gradients, Graph, NodeId};
pub use ops::NORM_EPS;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape error at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("numeric overflow: non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("loss node {0} is not a scalar")]
    NotScalar(usize),
    #[error("backward called before forward")]
    NotForwarded,
    #[error("leaf {0} is unbound")]
    Unbound(usize),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("gradient check: {0}")]
    GradCheck(String),
}
