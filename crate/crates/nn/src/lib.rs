//! Minimal reverse-mode autodiff over dense f64 tensors: enough convolution,
//! normalization and pooling to train small 2D/3D networks deterministically
//! on a CPU, with every gradient checkable against finite differences.

mod codec;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{Bound, Conv, Linear, ParamSet};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
}

pub type Result<T> = std::result::Result<T, Error>;
