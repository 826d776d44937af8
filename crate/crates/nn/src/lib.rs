//! Small CPU building blocks for convolutional networks.
//!
//! Every layer caches what it needs during `forward` and exposes an explicit
//! `backward` that returns the gradient with respect to its input while
//! accumulating gradients into its own parameters. Networks are composed by
//! hand, which keeps intermediate feature maps and their gradients directly
//! addressable. All arithmetic is single-threaded and therefore bit-for-bit
//! reproducible for a fixed seed.
//!
//! Activations use `NCHW` layout in an [`ndarray::Array4<f32>`]; matrix
//! products go through ndarray's GEMM.

mod conv;
mod layers;
mod norm;
mod optim;
mod param;

pub use conv::Conv2d;
pub use layers::{concat_channels, split_channels, GlobalAvgPool, Linear, Relu, Upsample2x};
pub use norm::BatchNorm2d;
pub use optim::Adam;
pub use param::{
    join, load_state_dict, state_dict, zero_grad, Param, Parameterized, StateDict, TensorData,
};

/// Activation tensor in `NCHW` layout.
pub type Tensor = ndarray::Array4<f32>;

/// Errors raised when restoring parameters from a state dict.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("state dict is missing parameter `{0}`")]
    MissingKey(String),
    #[error("state dict contains unknown parameter `{0}`")]
    UnexpectedKey(String),
}
