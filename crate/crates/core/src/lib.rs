//! Continuous conditional random fields as a fast replacement for the late
//! iterations of a latent diffusion sampler.
//!
//! The crate provides the CRF energy and its mean-field inference layer,
//! two-stage training (denoising with an adversarial term, then
//! distillation from a teacher sampler), a small latent diffusion surrogate
//! with DDIM sampling, the hybrid sampling pipeline, evaluation metrics and
//! a checksummed tensor container.

pub mod checkpoint;
pub mod crf;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod persist;
pub mod pipeline;
pub mod report;
pub mod surrogate;
pub mod train;

pub use error::{Error, Result};
pub use grid::{LatentGrid, TextCondition, TextEncoder};
