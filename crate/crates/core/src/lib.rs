//! Capsule networks with dynamic routing, the CFC primary-capsule layer,
//! reconstruction decoders, data loaders and a training harness.

pub mod autograd;
pub mod checkpoint;
pub mod capsule;
pub mod cfc;
pub mod data;
pub mod decoder;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod harness;
pub mod init;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
