//! Desk-scale latent diffusion surrogate: noise schedule, denoiser, data
//! and guided DDIM sampling.

pub mod data;
pub mod denoiser;
pub mod sampler;
pub mod schedule;
pub mod training;

pub use data::{gen_synthetic_latents, Dataset, DatasetSpec, Standardizer};
pub use denoiser::{eps_from_velocity, timestep_embedding, velocity_target, DenoiserConfig, DenoiserParams};
pub use sampler::{
    distill_capture_step, initial_noise, sample_teacher, sample_teacher_batch, GuidedDenoiser, TeacherTrajectory,
};
pub use schedule::{cfg_combine, cosine_alpha_bar, ddim_step, ddim_update, make_schedule, timestep_subset, NoiseSchedule};
pub use training::{heldout_noise_mse, train_denoiser, DenoiserTrainConfig, DenoiserTrainResult};
