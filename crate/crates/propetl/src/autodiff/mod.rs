//! Minimal reverse-mode automatic differentiation: a define-by-run graph
//! over dense f32 tensors with exactly the operators the encoder and the
//! shared-prototype modules need, plus straight-through binarization.

mod gradcheck;
mod graph;
pub mod linalg;
mod tensor;

pub use gradcheck::{finite_difference_check, FdReport};
pub use graph::{Graph, NodeId};
pub use tensor::{numel_of, Tensor};
