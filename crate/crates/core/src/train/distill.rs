//! Stage 2: schedule-aware distillation from teacher trajectories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crf::{backprop_crf, crf_infer, crf_infer_batch, CrfParams, Mode};
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, TextCondition};
use crate::optim::{AdamConfig, AdamW, LrSchedule, StepOutcome};
use crate::params::ParamSet;
use crate::surrogate::sampler::{distill_capture_step, sample_teacher_batch, GuidedDenoiser};
use crate::surrogate::schedule::NoiseSchedule;
use crate::train::stage1::{DivergenceDetector, LossRecord, TrainConfig};

/// An intermediate teacher latent and the final latent of the same chain.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillPair {
    pub z_s: LatentGrid,
    pub z_f: LatentGrid,
    pub cond: TextCondition,
}

/// Teacher chains for each `(condition, seed)`, captured at `ceil(0.8 S)`
/// and `S`.
pub fn teacher_pairs(
    model: GuidedDenoiser<'_>,
    schedule: &NoiseSchedule,
    shape: (usize, usize, usize),
    requests: &[(TextCondition, u64)],
) -> Result<Vec<DistillPair>> {
    let s = distill_capture_step(schedule.num_steps());
    let trajs = sample_teacher_batch(model, schedule, shape, requests, &[s])?;
    Ok(trajs
        .into_iter()
        .zip(requests)
        .map(|(t, (c, _))| DistillPair {
            z_s: t.captures[0].1.clone(),
            z_f: t.final_z,
            cond: c.clone(),
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct DistillResult {
    pub crf: CrfParams,
    pub losses: Vec<LossRecord>,
    pub skipped_steps: usize,
}

pub fn train_distill(pairs: &[DistillPair], init: &CrfParams, config: &TrainConfig) -> Result<DistillResult> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no teacher trajectories available for distillation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d157);
    let mut crf = init.clone();
    let lr = LrSchedule {
        peak: config.stage2_lr,
        warmup: config.stage2_warmup,
        total: config.stage2_steps,
    };
    let adam = AdamConfig {
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    };
    let shapes: Vec<usize> = crf.params().iter().map(|p| p.len()).collect();
    let mut opt = AdamW::new(adam, lr, &shapes);
    let mut detector = DivergenceDetector::new(config.divergence_window);
    let mut losses = Vec::with_capacity(config.stage2_steps);
    let mut skipped = 0;
    let b = config.stage2_batch_size;
    for step in 0..config.stage2_steps {
        let batch: Vec<&DistillPair> = (0..b).map(|_| &pairs[rng.gen_range(0..pairs.len())]).collect();
        let xs: Vec<LatentGrid> = batch.iter().map(|p| p.z_s.clone()).collect();
        let cs: Vec<TextCondition> = batch.iter().map(|p| p.cond.clone()).collect();
        let (ys, tape) = crf_infer_batch(&xs, &cs, &mut crf, Mode::Train)?;
        let mut l_dt = 0.0;
        let grad_out: Vec<LatentGrid> = ys
            .iter()
            .zip(&batch)
            .map(|(y, p)| {
                let (v, g) = config.distance.eval(y, &p.z_f);
                l_dt += v;
                g.scaled(1.0 / b as f64)
            })
            .collect();
        l_dt /= b as f64;
        detector.observe(step, l_dt)?;
        let grads = backprop_crf(&crf, tape.as_ref(), &grad_out)?;
        let step_size = match opt.step(crf.params_mut(), &grads, step) {
            StepOutcome::Applied { step_size } => step_size,
            StepOutcome::SkippedNonFinite => {
                skipped += 1;
                lr.step_size(step)
            }
        };
        crf.filters.enforce_constraints();
        losses.push(LossRecord {
            step,
            l_nt: None,
            l_adv: None,
            l_disc: None,
            l_dt: Some(l_dt),
            step_size,
        });
    }
    Ok(DistillResult {
        crf,
        losses,
        skipped_steps: skipped,
    })
}

/// Mean `||z_f - M(z_s)||` with `M` in inference mode, and the identity
/// baseline mean `||z_f - z_s||`.
pub fn evaluate_distillation(crf: &CrfParams, pairs: &[DistillPair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::invalid("no held-out teacher trajectories"));
    }
    let mut crf_sum = 0.0;
    let mut id_sum = 0.0;
    for p in pairs {
        crf_sum += p.z_f.distance(&crf_infer(&p.z_s, &p.cond, crf)?);
        id_sum += p.z_f.distance(&p.z_s);
    }
    let n = pairs.len() as f64;
    Ok((crf_sum / n, id_sum / n))
}
