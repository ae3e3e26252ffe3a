//! Two-stage CRF training.

pub mod discriminator;
pub mod distill;
pub mod losses;
pub mod stage1;

pub use discriminator::{spectral_normalize, DiscriminatorConfig, DiscriminatorParams};
pub use distill::{evaluate_distillation, teacher_pairs, train_distill, DistillPair, DistillResult};
pub use losses::{corrupt_latent, denoising_loss, distillation_loss, l2_distance_grad, sce_grad, sce_loss, sigmoid};
pub use stage1::{
    evaluate_denoising, sample_alpha, stage1_losses, train_stage1, DenoiseEval, DistanceKind, DivergenceDetector,
    LossRecord, Stage1Losses, Stage1Result, TrainConfig,
};
