//! Continuously variable-rate learned image compression.
//!
//! A variational autoencoder codec whose latent is scaled channel-wise by a
//! gain vector before quantization and rescaled by an inverse-gain vector
//! before decoding. One trained model covers a whole rate-distortion curve:
//! a rate index `s` picks a stored gain pair and an interpolation
//! coefficient `l` blends geometrically towards the next one.

pub mod autograd;
pub mod checkpoint;
pub mod coder;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod gain;
pub mod image;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod quant;
pub mod selftest;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
