//! Dense arrays, reverse-mode autodiff, optimizers and checkpoints.

pub mod checkpoint;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, RotationTable, Var};
pub use optim::{OptimizerKind, OptimizerState};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
