//! Sparse-view CT measurement simulation, a discrete-time diffusion prior with a
//! time-conditioned convolutional denoiser, conditional/unconditional partial-diffusion
//! reconstruction, multi-scale reconstruction-error OOD scoring, and an AUC evaluation
//! harness.
//!
//! The crate is organized around the pipeline stages:
//!
//! * [`tomography`]: parallel-beam Radon transform, its adjoint, filtered backprojection
//!   and sinogram subsampling (the measurement operator `A = P(mask) . R`).
//! * [`diffusion`]: variance-preserving noise schedule, forward perturbation, ancestral
//!   reverse step and posterior-mean denoising.
//! * [`denoiser`]: the time-conditioned noise-prediction network, its trainer and
//!   checkpoint format.
//! * [`samplers`]: skip-step deterministic reconstruction (multi-scale, conditional and
//!   unconditional), measurement-consistency projection, manifold-gradient correction and
//!   full predictor-corrector CT reconstruction.
//! * [`scoring`]: reconstruction errors across comparison domains, validation statistics,
//!   Z-score aggregation and the conditional/unconditional weighting scheme.
//! * [`evaluation`]: test-set construction, AUC with bootstrap confidence intervals, SSIM
//!   and report emission.
//! * [`pipeline`]: cache-backed orchestration of reconstruction, statistics fitting and
//!   scoring used by the command-line stages.
//! * [`data`]: IDX-format dataset ingestion and deterministic splits.

pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod samplers;
pub mod scoring;
pub mod tomography;

pub use error::{CoreError, Result};
pub use image::Image;
pub use tomography::{Measurements, ProjectionGeometry, Sinogram, SubsamplingMask};
