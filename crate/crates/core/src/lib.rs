//! DenseNet-121 with channel attention and depthwise-separable convolutions,
//! trained with focal loss, on a small CPU tensor/autograd engine.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use tensor::{Element, Tensor};
