//! Dense arrays, the differentiable tape, and gradient checking.

mod array;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use array::{Array, Precision};
pub use graph::{Attrs, AttnLayout, Gradients, Graph, NodeId, OpKind, Segment};
