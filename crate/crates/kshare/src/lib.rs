//! Training harness for kernel-shared CNNs: CIFAR and synthetic data,
//! run configs, checkpoints, the training loop, sweeps and the CLI helpers.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod sweep;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
