//! Dense `f64` tensors with reverse-mode differentiation.

mod gradcheck;
mod graph;
mod param;
mod tensor;

pub use gradcheck::{grad_check, relative_error, Coordinate, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
