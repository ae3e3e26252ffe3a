//! Noise-prediction regression for the denoiser.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::optim::{AdamConfig, AdamW, LrSchedule, StepOutcome};
use crate::params::ParamSet;
use crate::surrogate::data::Dataset;
use crate::surrogate::denoiser::{eps_from_velocity, velocity_target, DenoiserConfig, DenoiserParams};
use crate::surrogate::schedule::NoiseSchedule;
use crate::train::corrupt_latent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup: usize,
    /// Probability of replacing the condition with the null embedding.
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            learning_rate: 2e-3,
            warmup: 200,
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserTrainResult {
    pub params: DenoiserParams,
    /// Mean squared velocity error per step.
    pub losses: Vec<f64>,
    pub skipped_steps: usize,
}

/// One noised example.
struct Example {
    z_t: LatentGrid,
    t: usize,
    alpha_bar: f64,
    cond: Vec<f64>,
    eps: LatentGrid,
    velocity: LatentGrid,
}

fn draw_example(data: &Dataset, schedule: &NoiseSchedule, drop_p: f64, rng: &mut ChaCha8Rng) -> Result<Example> {
    let i = rng.gen_range(0..data.len());
    let t = rng.gen_range(0..schedule.t_train());
    let z = &data.latents[i];
    let eps = LatentGrid::randn(z.height(), z.width(), z.channels(), rng);
    let alpha_bar = schedule.alpha_bar(t)?;
    let z_t = corrupt_latent(z, alpha_bar, &eps)?;
    let cond = data.condition(i);
    let cond = if rng.gen::<f64>() < drop_p {
        vec![0.0; cond.dim()]
    } else {
        cond.embedding
    };
    Ok(Example {
        velocity: velocity_target(z, &eps, alpha_bar),
        z_t,
        t,
        alpha_bar,
        cond,
        eps,
    })
}

pub fn train_denoiser(
    data: &Dataset,
    schedule: &NoiseSchedule,
    model: &DenoiserConfig,
    config: &DenoiserTrainConfig,
) -> Result<DenoiserTrainResult> {
    if data.is_empty() || config.batch_size == 0 {
        return Err(Error::invalid("denoiser training needs data and a positive batch size"));
    }
    if data.spec.channels != model.channels || data.spec.cond_dim != model.cond_dim {
        return Err(Error::shape("dataset and denoiser shapes differ"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = DenoiserParams::init(model, &mut rng)?;
    let shapes: Vec<usize> = params.params().iter().map(|p| p.len()).collect();
    let lr = LrSchedule {
        peak: config.learning_rate,
        warmup: config.warmup.min(config.steps),
        total: config.steps,
    };
    let mut opt = AdamW::new(AdamConfig::default(), lr, &shapes);
    let mut losses = Vec::with_capacity(config.steps);
    let mut skipped = 0;
    let mut initial_avg: Option<f64> = None;
    for step in 0..config.steps {
        let batch = (0..config.batch_size)
            .map(|_| draw_example(data, schedule, config.cond_dropout, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let zs: Vec<LatentGrid> = batch.iter().map(|b| b.z_t.clone()).collect();
        let ts: Vec<usize> = batch.iter().map(|b| b.t).collect();
        let cs: Vec<Vec<f64>> = batch.iter().map(|b| b.cond.clone()).collect();
        let target: Vec<f64> = batch.iter().flat_map(|b| b.velocity.as_slice().iter().copied()).collect();
        let (out, cache) = params.forward_train(&zs, &ts, &cs)?;
        let n = out.len() as f64;
        let mut loss = 0.0;
        let g: Vec<f64> = out
            .iter()
            .zip(&target)
            .map(|(o, e)| {
                let d = o - e;
                loss += d * d;
                2.0 * d / n
            })
            .collect();
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("denoiser loss at step {step}")));
        }
        let avg = *initial_avg.get_or_insert(loss);
        if loss > 10.0 * avg.max(1.0) {
            return Err(Error::Diverged {
                step,
                loss,
                average: avg,
            });
        }
        losses.push(loss);
        let grads = params.backward(&cache, &g);
        if opt.step(params.params_mut(), &grads, step) == StepOutcome::SkippedNonFinite {
            skipped += 1;
        }
    }
    Ok(DenoiserTrainResult {
        params,
        losses,
        skipped_steps: skipped,
    })
}

/// Held-out noise-prediction MSE of `params` (via the velocity conversion)
/// and of the zero predictor,
/// over `draws` seeded `(sample, t, noise)` triples.
pub fn heldout_noise_mse(
    params: &DenoiserParams,
    data: &Dataset,
    schedule: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = (0..draws)
        .map(|_| draw_example(data, schedule, 0.0, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let (mut model_se, mut zero_se, mut n) = (0.0, 0.0, 0usize);
    for chunk in batch.chunks(128) {
        let zs: Vec<LatentGrid> = chunk.iter().map(|b| b.z_t.clone()).collect();
        let ts: Vec<usize> = chunk.iter().map(|b| b.t).collect();
        let cs: Vec<Vec<f64>> = chunk.iter().map(|b| b.cond.clone()).collect();
        let pred = params.predict(&zs, &ts, &cs)?;
        for (v, b) in pred.iter().zip(chunk) {
            let eps = eps_from_velocity(&b.z_t, v, b.alpha_bar);
            model_se += eps.sub(&b.eps).as_slice().iter().map(|v| v * v).sum::<f64>();
            zero_se += b.eps.as_slice().iter().map(|v| v * v).sum::<f64>();
            n += eps.len();
        }
    }
    Ok((model_se / n as f64, zero_se / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::data::{gen_synthetic_latents, DatasetSpec};
    use crate::surrogate::schedule::make_schedule;

    fn setup() -> (Dataset, NoiseSchedule, DenoiserConfig) {
        let data = gen_synthetic_latents(&DatasetSpec {
            height: 4,
            width: 4,
            size: 64,
            ..DatasetSpec::default()
        })
        .unwrap();
        let cfg = DenoiserConfig {
            widths: vec![4, 4],
            ..DenoiserConfig::default()
        };
        (data, make_schedule(1000, 10).unwrap(), cfg)
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (data, s, cfg) = setup();
        let tc = DenoiserTrainConfig {
            steps: 0,
            seed: 3,
            ..DenoiserTrainConfig::default()
        };
        let r = train_denoiser(&data, &s, &cfg, &tc).unwrap();
        let init = DenoiserParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(r.params, init);
        assert!(r.losses.is_empty());
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let (data, s, cfg) = setup();
        let tc = DenoiserTrainConfig {
            steps: 5,
            batch_size: 4,
            ..DenoiserTrainConfig::default()
        };
        let a = train_denoiser(&data, &s, &cfg, &tc).unwrap();
        let b = train_denoiser(&data, &s, &cfg, &tc).unwrap();
        assert_eq!(a, b);
    }
}
