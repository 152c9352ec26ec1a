//! Minimal dense-tensor machinery for the time-conditioned denoising network.
//!
//! Everything is generic over [`Scalar`] so the exact same layer code runs in f32 for
//! production and in f64 for finite-difference gradient verification.

pub mod layers;
pub mod scalar;
pub mod tensor;
pub mod unet;

pub use scalar::Scalar;
pub use tensor::Tensor;
pub use unet::{UnetConfig, UnetParams};
