//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only tape of nodes. Every operation reads
//! existing nodes and pushes a new one, so creation order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep that
//! visits each node once. Gradients accumulate additively on fan-out.
//!
//! Broadcasting is limited to a `1 × 1` scalar or a `1 × cols` row vector on
//! the right-hand side of binary element-wise ops; any other mismatch is a
//! [`AutodiffError::ShapeMismatch`].
//!
//! ```
//! use davam::autodiff::{Graph, Tensor};
//!
//! let g = Graph::<f64>::new();
//! let t = g.leaf(Tensor::scalar(3.0));
//! let y = g.mul(t, g.stop_gradient(t)).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(t).unwrap().item(), 3.0);
//! ```

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradientCheckReport, ParamSource};
pub use graph::{Graph, Var};
pub use tensor::{matmul, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("non-finite input to {op}")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("loss function is not deterministic ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },
}
