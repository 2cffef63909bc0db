//! Minimal differentiable computation: tensors, a recording tape, layers,
//! Adam and checkpoints.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use graph::Graph;
pub use params::{Adam, Grads, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
