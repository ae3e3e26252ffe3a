//! Stage 1: denoising with an adversarial term on natural latents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crf::{backprop_crf, crf_infer, crf_infer_batch, CrfParams, Mode};
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, TextCondition};
use crate::nn::Geometry;
use crate::optim::{AdamConfig, AdamW, LrSchedule, StepOutcome};
use crate::params::ParamSet;
use crate::surrogate::data::Dataset;
use crate::train::discriminator::{DiscriminatorConfig, DiscriminatorParams};
use crate::train::losses::{corrupt_latent, sce_grad, sce_loss};

/// How the reconstruction distance enters the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    /// `||a - b||_2`
    Norm,
    /// `||a - b||_2^2`
    Squared,
}

impl DistanceKind {
    /// Value and gradient with respect to `pred`.
    pub fn eval(self, pred: &LatentGrid, target: &LatentGrid) -> (f64, LatentGrid) {
        match self {
            DistanceKind::Norm => crate::train::losses::l2_distance_grad(pred, target),
            DistanceKind::Squared => {
                let diff = pred.sub(target);
                let n = diff.norm();
                (n * n, diff.scaled(2.0))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub stage1_warmup: usize,
    pub stage2_steps: usize,
    pub stage2_lr: f64,
    pub stage2_warmup: usize,
    /// Stage-1 batch size.
    pub batch_size: usize,
    /// Distillation batch size; larger than stage 1 so the normalizer's
    /// batch statistics are not dominated by per-sample mean offsets.
    pub stage2_batch_size: usize,
    /// Width of the uniform noise-ratio window above the insertion-step
    /// `alpha_bar`.
    pub alpha_width: f64,
    pub adv_weight: f64,
    pub distance: DistanceKind,
    pub discriminator: DiscriminatorConfig,
    pub weight_decay: f64,
    /// Steps averaged to form the divergence reference.
    pub divergence_window: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 20_000,
            stage1_lr: 1e-3,
            stage1_warmup: 5_000,
            stage2_steps: 2_000,
            stage2_lr: 1e-3,
            stage2_warmup: 0,
            batch_size: 8,
            stage2_batch_size: 32,
            alpha_width: 0.15,
            adv_weight: 1.0,
            distance: DistanceKind::Norm,
            discriminator: DiscriminatorConfig::default(),
            weight_decay: 0.0,
            divergence_window: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_lr <= 0.0 || self.stage2_lr <= 0.0 {
            return Err(Error::invalid("step sizes must be positive"));
        }
        if self.stage1_warmup > self.stage1_steps || self.stage2_warmup > self.stage2_steps {
            return Err(Error::invalid("warm-up cannot exceed the step count"));
        }
        if self.batch_size == 0 || self.stage2_batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha_width) {
            return Err(Error::invalid("noise-ratio window must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One row of a loss curve; absent entries belong to the other stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_nt: Option<f64>,
    pub l_adv: Option<f64>,
    pub l_disc: Option<f64>,
    pub l_dt: Option<f64>,
    pub step_size: f64,
}

/// Noise-ratio policy: uniform on `[alpha_bar_s, alpha_bar_s + width]`
/// clipped to `[0, 1]`.
pub fn sample_alpha<R: Rng + ?Sized>(alpha_bar_s: f64, width: f64, rng: &mut R) -> f64 {
    let lo = alpha_bar_s.clamp(0.0, 1.0);
    let hi = (alpha_bar_s + width).clamp(0.0, 1.0);
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Batch losses of the generator and discriminator objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Losses {
    /// Mean reconstruction distance.
    pub l_nt: f64,
    /// Mean per-site `sce(D(M(z~)), 1)`.
    pub l_adv: f64,
    /// `mean sce(D(z), 1) + mean sce(D(M(z~)), 0)`.
    pub l_disc: f64,
}

impl Stage1Losses {
    /// `L_NT + L_adv` with unit adversarial weight.
    pub fn generator_total(&self) -> f64 {
        self.l_nt + self.l_adv
    }
}

fn stack(grids: &[LatentGrid]) -> Vec<f64> {
    grids.iter().flat_map(|g| g.as_slice().iter().copied()).collect()
}

fn mean_sce(logits: &[f64], target: f64) -> f64 {
    logits.iter().map(|&a| sce_loss(a, target)).sum::<f64>() / logits.len() as f64
}

/// Both stage-1 objectives for a batch, with `M` and `D` in training mode
/// and neither parameter set modified. Real and generated grids share one
/// discriminator batch, so its normalization statistics are joint.
pub fn stage1_losses(
    zs: &[LatentGrid],
    cs: &[TextCondition],
    crf: &CrfParams,
    disc: &DiscriminatorParams,
    alphas: &[f64],
    noises: &[LatentGrid],
    distance: DistanceKind,
) -> Result<Stage1Losses> {
    if zs.len() != alphas.len() || zs.len() != noises.len() {
        return Err(Error::shape("stage-1 batch lengths differ"));
    }
    let corrupted = zs
        .iter()
        .zip(alphas)
        .zip(noises)
        .map(|((z, &a), n)| corrupt_latent(z, a, n))
        .collect::<Result<Vec<_>>>()?;
    let mut m = crf.clone();
    let (ys, _) = crf_infer_batch(&corrupted, cs, &mut m, Mode::Train)?;
    let l_nt = zs.iter().zip(&ys).map(|(z, y)| distance.eval(y, z).0).sum::<f64>() / zs.len() as f64;
    let g = Geometry::new(2 * zs.len(), zs[0].height(), zs[0].width());
    let mut joint = stack(zs);
    joint.extend(stack(&ys));
    let (logits, _) = disc.forward_train(&joint, g)?;
    let (real, fake) = logits.split_at(logits.len() / 2);
    Ok(Stage1Losses {
        l_nt,
        l_adv: mean_sce(fake, 1.0),
        l_disc: mean_sce(real, 1.0) + mean_sce(fake, 0.0),
    })
}

#[derive(Debug, Clone)]
pub struct Stage1Result {
    pub crf: CrfParams,
    pub disc: DiscriminatorParams,
    pub losses: Vec<LossRecord>,
    pub skipped_steps: usize,
}

/// Aborts training when the loss exceeds ten times the average of the
/// first `window` values.
#[derive(Debug, Clone)]
pub struct DivergenceDetector {
    window: usize,
    seen: Vec<f64>,
    reference: Option<f64>,
}

impl DivergenceDetector {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            seen: Vec::new(),
            reference: None,
        }
    }

    pub fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        match self.reference {
            Some(avg) if loss > 10.0 * avg => Err(Error::Diverged {
                step,
                loss,
                average: avg,
            }),
            Some(_) => Ok(()),
            None => {
                self.seen.push(loss);
                if self.seen.len() == self.window {
                    self.reference = Some(self.seen.iter().sum::<f64>() / self.window as f64);
                }
                Ok(())
            }
        }
    }
}

/// Alternating generator / discriminator updates, 1:1.
pub fn train_stage1(
    data: &Dataset,
    init: &CrfParams,
    alpha_bar_s: f64,
    config: &TrainConfig,
) -> Result<Stage1Result> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("stage 1 needs a dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut crf = init.clone();
    let mut disc = DiscriminatorParams::init(&config.discriminator, &mut rng)?;
    let adam = AdamConfig {
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    };
    let lr = LrSchedule {
        peak: config.stage1_lr,
        warmup: config.stage1_warmup,
        total: config.stage1_steps,
    };
    let shapes = |p: &dyn ParamSet| p.params().iter().map(|b| b.len()).collect::<Vec<_>>();
    let mut g_opt = AdamW::new(adam, lr, &shapes(&crf));
    let mut d_opt = AdamW::new(adam, lr, &shapes(&disc));
    let mut detector = DivergenceDetector::new(config.divergence_window);
    let mut losses = Vec::with_capacity(config.stage1_steps);
    let mut skipped = 0;
    let (h, w, d) = data.latents[0].shape();
    let b = config.batch_size;
    let g = Geometry::new(2 * b, h, w);
    let per = h * w * d;

    for step in 0..config.stage1_steps {
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..data.len())).collect();
        let zs: Vec<LatentGrid> = idx.iter().map(|&i| data.latents[i].clone()).collect();
        let cs: Vec<TextCondition> = idx.iter().map(|&i| data.condition(i)).collect();
        let corrupted = zs
            .iter()
            .map(|z| {
                let a = sample_alpha(alpha_bar_s, config.alpha_width, &mut rng);
                let n = LatentGrid::randn(h, w, d, &mut rng);
                corrupt_latent(z, a, &n)
            })
            .collect::<Result<Vec<_>>>()?;

        // Generator step; the discriminator is read only.
        let (ys, tape) = crf_infer_batch(&corrupted, &cs, &mut crf, Mode::Train)?;
        let mut l_nt = 0.0;
        let mut grad_out: Vec<LatentGrid> = ys
            .iter()
            .zip(&zs)
            .map(|(y, z)| {
                let (v, gy) = config.distance.eval(y, z);
                l_nt += v;
                gy.scaled(1.0 / b as f64)
            })
            .collect();
        l_nt /= b as f64;
        detector.observe(step, l_nt)?;
        // One joint forward of [real; generated] serves both updates.
        let mut joint = stack(&zs);
        joint.extend(stack(&ys));
        let (logits, cache) = disc.forward_train(&joint, g)?;
        let half = logits.len() / 2;
        let (real_logits, fake_logits) = logits.split_at(half);
        let l_adv = mean_sce(fake_logits, 1.0);
        let l_disc = mean_sce(real_logits, 1.0) + mean_sce(fake_logits, 0.0);
        let nh = half as f64;

        if config.adv_weight != 0.0 {
            let mut g_logits = vec![0.0; logits.len()];
            for (gl, &a) in g_logits[half..].iter_mut().zip(fake_logits) {
                *gl = config.adv_weight * sce_grad(a, 1.0) / nh;
            }
            let (_, g_in) = disc.backward(&cache, &g_logits, true);
            let g_in = g_in.expect("input gradient requested");
            for (go, chunk) in grad_out.iter_mut().zip(g_in[b * per..].chunks_exact(per)) {
                for (a, v) in go.as_mut_slice().iter_mut().zip(chunk) {
                    *a += v;
                }
            }
        }
        let crf_grads = backprop_crf(&crf, tape.as_ref(), &grad_out)?;
        let step_size = match g_opt.step(crf.params_mut(), &crf_grads, step) {
            StepOutcome::Applied { step_size } => step_size,
            StepOutcome::SkippedNonFinite => {
                skipped += 1;
                lr.step_size(step)
            }
        };
        crf.filters.enforce_constraints();

        // Discriminator step on the detached generator output.
        let g_logits: Vec<f64> = real_logits
            .iter()
            .map(|&a| sce_grad(a, 1.0) / nh)
            .chain(fake_logits.iter().map(|&a| sce_grad(a, 0.0) / nh))
            .collect();
        let (d_grads, _) = disc.backward(&cache, &g_logits, false);
        if d_opt.step(disc.params_mut(), &d_grads, step) == StepOutcome::SkippedNonFinite {
            skipped += 1;
        }
        disc.commit(&cache);
        disc.refresh_spectral_converged();

        losses.push(LossRecord {
            step,
            l_nt: Some(l_nt),
            l_adv: Some(l_adv),
            l_disc: Some(l_disc),
            l_dt: None,
            step_size,
        });
    }
    Ok(Stage1Result {
        crf,
        disc,
        losses,
        skipped_steps: skipped,
    })
}

/// Held-out comparison of `M` (inference mode) against the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseEval {
    /// Fraction of samples with `||z - M(z~)|| < ||z - z~||`.
    pub improved_fraction: f64,
    pub mean_crf: f64,
    pub mean_identity: f64,
}

pub fn evaluate_denoising(
    crf: &CrfParams,
    data: &Dataset,
    alpha_bar_s: f64,
    alpha_width: f64,
    seed: u64,
) -> Result<DenoiseEval> {
    if data.is_empty() {
        return Err(Error::invalid("no held-out samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut better, mut sum_crf, mut sum_id) = (0usize, 0.0, 0.0);
    for i in 0..data.len() {
        let z = &data.latents[i];
        let a = sample_alpha(alpha_bar_s, alpha_width, &mut rng);
        let n = LatentGrid::randn(z.height(), z.width(), z.channels(), &mut rng);
        let zt = corrupt_latent(z, a, &n)?;
        let y = crf_infer(&zt, &data.condition(i), crf)?;
        let (dc, di) = (z.distance(&y), z.distance(&zt));
        if dc < di {
            better += 1;
        }
        sum_crf += dc;
        sum_id += di;
    }
    let n = data.len() as f64;
    Ok(DenoiseEval {
        improved_fraction: better as f64 / n,
        mean_crf: sum_crf / n,
        mean_identity: sum_id / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_window_is_clipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let a = sample_alpha(0.9, 0.15, &mut rng);
            assert!((0.9..=1.0).contains(&a));
        }
        assert_eq!(sample_alpha(1.2, 0.1, &mut rng), 1.0);
    }

    #[test]
    fn detector_trips_on_tenfold_growth() {
        let mut d = DivergenceDetector::new(2);
        d.observe(0, 1.0).unwrap();
        d.observe(1, 3.0).unwrap();
        d.observe(2, 19.0).unwrap();
        assert!(matches!(d.observe(3, 20.5), Err(Error::Diverged { step: 3, .. })));
        assert!(matches!(DivergenceDetector::new(3).observe(0, f64::NAN), Err(Error::NonFinite(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            TrainConfig { stage1_lr: 0.0, ..TrainConfig::default() },
            TrainConfig { stage1_warmup: 30_000, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }
}
