//! Dense tensors, kernels, automatic differentiation and the `EGT1` format.

pub mod egt;
pub mod grad_check;
pub mod graph;
pub mod kernels;
mod params;
mod rng;
mod tensor;

pub use graph::{FocalForm, Gradients, Graph, Var};
pub use kernels::Padding;
pub use params::{BoundParams, ParamSet};
pub use rng::{Rng, RngState};
pub use tensor::Tensor;
