//! Continuous CRF over latent grids: parameters, energy, inference.

pub mod energy;
pub mod inference;
pub mod ops;
pub mod oracle;
pub mod params;

pub use energy::{energy_gradient, total_energy, EnergyBreakdown};
pub use inference::{backprop_crf, crf_infer, crf_infer_batch, mean_field_step, Mode, Tape};
pub use params::{CrfConfig, CrfParams};
