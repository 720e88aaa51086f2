//! Convolutional networks with inter-layer kernel sharing.
//!
//! Layers with identical convolution hyperparameters can be bound to a single
//! stored kernel. The crate provides the tensor kernels, layers, the sharing
//! parameter store, ConvMixer and SE-ResNet builders, optimizers, and
//! closed-form parameter/FLOP accounting. It needs only `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod accounting;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod models;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod sharing;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Mode};
pub use models::{Model, ModelConfig, SharingPlan, SharingPreset};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use sharing::{ParamId, ParameterStore};
pub use tensor::Tensor;
