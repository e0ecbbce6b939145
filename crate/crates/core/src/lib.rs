//! Identity-enhanced expression recognition on a small reverse-mode autodiff
//! engine: NHWC tensors and ops, dense-block backbones, the two-stream fused
//! model and its variants, cross-entropy and focal losses, SGD training with
//! cross-validation, checkpoints and a synthetic face benchmark.

pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Mode, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
