//! Dense double-precision tensors with tape-based reverse-mode differentiation.
//!
//! Every operation on a tensor that belongs to a [`Graph`] is appended to that
//! graph. [`grad`] walks the graph backwards from a scalar output. When asked
//! to `create_graph`, the vector-Jacobian products are themselves built from
//! recorded operations, so the returned gradients can be differentiated again.
//! This is what lets a meta-learning outer step differentiate through an inner
//! SGD update.
//!
//! Tensors are rank 0, 1 or 2. Binary elementwise operations broadcast scalars,
//! row vectors and column vectors against matrices; nothing more general.
//!
//! ```
//! use dgsml::engine::{grad, Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(&Tensor::scalar(3.0));
//! let y = x.mul(&x).unwrap();
//! let dx = grad(&y, &[&x], false).unwrap();
//! assert_eq!(dx[0].item(), 6.0);
//! ```

mod backward;
mod ops;
mod tensor;

pub use backward::grad;
pub use tensor::{Graph, NodeId, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("operands belong to different computation graphs")]
    GraphMismatch,
}

pub type Result<T> = std::result::Result<T, EngineError>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(EngineError::Dimension {
        op,
        detail: detail.into(),
    })
}
