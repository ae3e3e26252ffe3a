//! The hybrid sampler: sparse-schedule surrogate steps, one CRF application,
//! then the final steps of a dense schedule. Also the variance and
//! convergence diagnostics.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crf::inference::crf_infer_trajectory;
use crate::crf::{crf_infer, CrfParams};
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, TextCondition};
use crate::surrogate::sampler::{initial_noise, GuidedDenoiser};
use crate::surrogate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Steps taken on the sparse schedule.
    pub pre_steps: usize,
    /// Length of the sparse schedule.
    pub pre_schedule: usize,
    /// Final steps taken on the dense schedule.
    pub post_steps: usize,
    /// Length of the dense schedule.
    pub post_schedule: usize,
    pub crf_enabled: bool,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pre_steps: 31,
            pre_schedule: 40,
            post_steps: 2,
            post_schedule: 50,
            crf_enabled: true,
            guidance: 2.0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// 19 of 20 sparse steps, the CRF, then the last dense step.
    pub fn sparse() -> Self {
        Self {
            pre_steps: 19,
            pre_schedule: 20,
            post_steps: 1,
            ..Self::default()
        }
    }

    /// The same recipe with the CRF stage skipped.
    pub fn truncated(&self) -> Self {
        Self {
            crf_enabled: false,
            ..self.clone()
        }
    }
}

/// Where the sparse chain stops and the dense chain resumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Handoff {
    /// Timestep of the state leaving the sparse schedule (`None` if clean).
    pub pre_timestep: Option<usize>,
    pub pre_alpha_bar: f64,
    /// Dense-schedule step index at which sampling resumes.
    pub reentry_step: usize,
    pub reentry_timestep: Option<usize>,
    /// Nominal noise level assigned to the CRF output.
    pub reentry_alpha_bar: f64,
}

/// Per-stage wall-clock (ms) and FLOP accounting for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageCost {
    pub pre_ms: f64,
    pub crf_ms: f64,
    pub post_ms: f64,
    pub total_ms: f64,
    pub pre_flops: u64,
    pub crf_flops: u64,
    pub post_flops: u64,
}

impl StageCost {
    pub fn stage_sum_ms(&self) -> f64 {
        self.pre_ms + self.crf_ms + self.post_ms
    }

    pub fn total_flops(&self) -> u64 {
        self.pre_flops + self.crf_flops + self.post_flops
    }
}

/// A validated pipeline: both schedules and the handoff between them.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridPipeline {
    pub config: PipelineConfig,
    pub pre: NoiseSchedule,
    pub post: NoiseSchedule,
    pub handoff: Handoff,
}

impl HybridPipeline {
    /// Builds both schedules over the table of `base` and checks that the
    /// dense re-entry point is no noisier than the sparse exit point.
    pub fn new(config: PipelineConfig, base: &NoiseSchedule) -> Result<Self> {
        if config.pre_steps > config.pre_schedule {
            return Err(Error::Handoff(format!(
                "{} pre steps exceed the {}-step schedule",
                config.pre_steps, config.pre_schedule
            )));
        }
        if config.post_steps > config.post_schedule {
            return Err(Error::Handoff(format!(
                "{} post steps exceed the {}-step schedule",
                config.post_steps, config.post_schedule
            )));
        }
        if !config.guidance.is_finite() {
            return Err(Error::invalid("guidance scale must be finite"));
        }
        let pre = base.with_steps(config.pre_schedule)?;
        let post = base.with_steps(config.post_schedule)?;
        let pre_timestep = pre.state_timestep(config.pre_steps)?;
        let reentry_step = config.post_schedule - config.post_steps;
        let reentry_timestep = post.state_timestep(reentry_step)?;
        let handoff = Handoff {
            pre_timestep,
            pre_alpha_bar: pre.alpha_bar_or_clean(pre_timestep)?,
            reentry_step,
            reentry_timestep,
            reentry_alpha_bar: post.alpha_bar_or_clean(reentry_timestep)?,
        };
        if handoff.pre_alpha_bar > handoff.reentry_alpha_bar {
            return Err(Error::Handoff(format!(
                "sparse exit alpha_bar {:.6} (t={:?}) is cleaner than dense re-entry alpha_bar {:.6} (t={:?})",
                handoff.pre_alpha_bar, pre_timestep, handoff.reentry_alpha_bar, reentry_timestep
            )));
        }
        Ok(Self {
            config,
            pre,
            post,
            handoff,
        })
    }

    fn denoiser_flops(model: &GuidedDenoiser<'_>, shape: (usize, usize, usize)) -> u64 {
        let branches = if model.guidance == 0.0 || model.guidance == 1.0 { 1 } else { 2 };
        (branches * model.denoiser.flops_per_call(shape.0, shape.1)) as u64
    }

    /// The sparse-schedule stage from seeded noise, shared by the CRF and
    /// no-CRF variants.
    pub fn run_pre(
        &self,
        model: GuidedDenoiser<'_>,
        shape: (usize, usize, usize),
        requests: &[(TextCondition, u64)],
        cost: &mut StageCost,
    ) -> Result<Vec<LatentGrid>> {
        let (h, w, d) = shape;
        let t0 = Instant::now();
        let init: Vec<LatentGrid> = requests.iter().map(|&(_, s)| initial_noise(h, w, d, s)).collect();
        let conds: Vec<TextCondition> = requests.iter().map(|(c, _)| c.clone()).collect();
        let out = model.run(&self.pre, init, &conds, 0..self.config.pre_steps, |_, _| {})?;
        cost.pre_ms += t0.elapsed().as_secs_f64() * 1e3;
        cost.pre_flops += (self.config.pre_steps * requests.len()) as u64 * Self::denoiser_flops(&model, shape);
        Ok(out)
    }

    /// The CRF stage (when `crf` is given) and the dense-schedule tail.
    pub fn finish(
        &self,
        model: GuidedDenoiser<'_>,
        crf: Option<&CrfParams>,
        states: Vec<LatentGrid>,
        requests: &[(TextCondition, u64)],
        cost: &mut StageCost,
    ) -> Result<Vec<LatentGrid>> {
        if states.len() != requests.len() {
            return Err(Error::shape("state and request counts differ"));
        }
        let conds: Vec<TextCondition> = requests.iter().map(|(c, _)| c.clone()).collect();
        let states = match crf {
            Some(crf) => {
                let t0 = Instant::now();
                let out = crf_stage(crf, &states, &conds)?;
                cost.crf_ms += t0.elapsed().as_secs_f64() * 1e3;
                if let Some(x) = out.first() {
                    cost.crf_flops += (out.len() * crf.flops_per_call(x.height(), x.width())) as u64;
                }
                out
            }
            None => states,
        };
        let shape = states.first().map(LatentGrid::shape).unwrap_or((0, 0, 0));
        let t0 = Instant::now();
        let range = self.handoff.reentry_step..self.config.post_schedule;
        let out = model.run(&self.post, states, &conds, range, |_, _| {})?;
        cost.post_ms += t0.elapsed().as_secs_f64() * 1e3;
        cost.post_flops += (self.config.post_steps * requests.len()) as u64 * Self::denoiser_flops(&model, shape);
        Ok(out)
    }

    /// Full hybrid sampling for a batch of `(condition, seed)` requests.
    /// The CRF runs only when the config enables it.
    pub fn sample_batch(
        &self,
        model: GuidedDenoiser<'_>,
        crf: &CrfParams,
        shape: (usize, usize, usize),
        requests: &[(TextCondition, u64)],
    ) -> Result<(Vec<LatentGrid>, StageCost)> {
        let t0 = Instant::now();
        let mut cost = StageCost::default();
        let pre = self.run_pre(model, shape, requests, &mut cost)?;
        let crf = self.config.crf_enabled.then_some(crf);
        let out = self.finish(model, crf, pre, requests, &mut cost)?;
        cost.total_ms = t0.elapsed().as_secs_f64() * 1e3;
        Ok((out, cost))
    }
}

/// One CRF application per state, in parallel over the batch.
pub fn crf_stage(crf: &CrfParams, states: &[LatentGrid], conds: &[TextCondition]) -> Result<Vec<LatentGrid>> {
    if states.len() != conds.len() {
        return Err(Error::shape("state and condition counts differ"));
    }
    states
        .par_iter()
        .zip(conds.par_iter())
        .map(|(x, c)| crf_infer(x, c, crf))
        .collect()
}

/// One hybrid sample with the guidance scale taken from `config`.
pub fn hybrid_sample(
    c: &TextCondition,
    seed: u64,
    config: &PipelineConfig,
    denoiser: &crate::surrogate::DenoiserParams,
    crf: &CrfParams,
    base: &NoiseSchedule,
    shape: (usize, usize, usize),
) -> Result<(LatentGrid, StageCost)> {
    let pipeline = HybridPipeline::new(config.clone(), base)?;
    let model = GuidedDenoiser::new(denoiser, config.guidance);
    let (mut out, cost) = pipeline.sample_batch(model, crf, shape, &[(c.clone(), seed)])?;
    Ok((out.remove(0), cost))
}

/// Variance of each latent across all its entries, averaged over the
/// generations, for state 0 (the initial noise) through state `S`.
pub fn variance_curve(
    model: GuidedDenoiser<'_>,
    schedule: &NoiseSchedule,
    shape: (usize, usize, usize),
    requests: &[(TextCondition, u64)],
) -> Result<Vec<f64>> {
    if requests.is_empty() {
        return Err(Error::invalid("variance curve needs at least one prompt"));
    }
    let (h, w, d) = shape;
    let mut curve = vec![0.0; schedule.num_steps() + 1];
    let n = requests.len() as f64;
    let mean_var = |states: &[LatentGrid]| states.iter().map(|z| z.mean_variance().1).sum::<f64>() / n;
    let init: Vec<LatentGrid> = requests.iter().map(|&(_, s)| initial_noise(h, w, d, s)).collect();
    curve[0] = mean_var(&init);
    let conds: Vec<TextCondition> = requests.iter().map(|(c, _)| c.clone()).collect();
    model.run(schedule, init, &conds, 0..schedule.num_steps(), |k, states| {
        curve[k] = mean_var(states)
    })?;
    Ok(curve)
}

/// Mean-field iterates and their relative updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceCurve {
    /// `rel_changes[t - 1] = ||y(t) - y(t-1)|| / ||y(t-1)||`, `t = 1..=max_iters`.
    pub rel_changes: Vec<f64>,
    /// `y(0) = x` through `y(max_iters)`.
    pub snapshots: Vec<LatentGrid>,
}

impl ConvergenceCurve {
    /// Relative update made by iteration `t` (1-based).
    pub fn change_at(&self, t: usize) -> Option<f64> {
        t.checked_sub(1).and_then(|i| self.rel_changes.get(i).copied())
    }
}

pub fn convergence_curve(
    x: &LatentGrid,
    c: &TextCondition,
    crf: &CrfParams,
    max_iters: usize,
) -> Result<ConvergenceCurve> {
    let snapshots = crf_infer_trajectory(x, c, crf, max_iters)?;
    let rel_changes = snapshots
        .windows(2)
        .map(|p| {
            let diff = p[1].distance(&p[0]);
            let base = p[0].norm();
            if diff == 0.0 {
                0.0
            } else {
                diff / base
            }
        })
        .collect();
    Ok(ConvergenceCurve {
        rel_changes,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::CrfConfig;
    use crate::grid::TextEncoder;
    use crate::surrogate::sampler::sample_teacher;
    use crate::surrogate::schedule::make_schedule;
    use crate::surrogate::{DenoiserConfig, DenoiserParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn denoiser() -> DenoiserParams {
        let cfg = DenoiserConfig {
            channels: 4,
            widths: vec![4, 4],
            time_dim: 4,
            cond_dim: 8,
            ..DenoiserConfig::default()
        };
        DenoiserParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn default_handoff_indices() {
        let base = make_schedule(1000, 50).unwrap();
        let p = HybridPipeline::new(PipelineConfig::default(), &base).unwrap();
        assert_eq!(p.handoff.pre_timestep, Some(200));
        assert_eq!(p.handoff.reentry_step, 48);
        assert_eq!(p.handoff.reentry_timestep, Some(20));
        let s = HybridPipeline::new(PipelineConfig::sparse(), &base).unwrap();
        assert_eq!(s.handoff.pre_timestep, Some(0));
        assert_eq!(s.handoff.reentry_timestep, Some(0));
    }

    #[test]
    fn rejects_bad_configs() {
        let base = make_schedule(1000, 50).unwrap();
        let too_many = PipelineConfig {
            pre_steps: 41,
            ..PipelineConfig::default()
        };
        assert!(matches!(HybridPipeline::new(too_many, &base), Err(Error::Handoff(_))));
        // Exit at t=200 but re-entry far noisier than that.
        let noisy_reentry = PipelineConfig {
            post_steps: 30,
            ..PipelineConfig::default()
        };
        assert!(matches!(HybridPipeline::new(noisy_reentry, &base), Err(Error::Handoff(_))));
    }

    #[test]
    fn full_chain_without_crf_is_the_teacher() {
        let den = denoiser();
        let base = make_schedule(1000, 12).unwrap();
        let cfg = PipelineConfig {
            pre_steps: 12,
            pre_schedule: 12,
            post_steps: 0,
            post_schedule: 12,
            crf_enabled: false,
            guidance: 2.5,
            seed: 0,
        };
        let crf = CrfParams::identity(&CrfConfig::default()).unwrap();
        let c = TextEncoder::new(8, 8, 0).condition(3).unwrap();
        let (z, _) = hybrid_sample(&c, 17, &cfg, &den, &crf, &base, (4, 4, 4)).unwrap();
        let teacher = sample_teacher(GuidedDenoiser::new(&den, 2.5), &base, (4, 4, 4), &c, 17, &[]).unwrap();
        assert_eq!(z, teacher.final_z);
    }

    #[test]
    fn identity_crf_matches_truncated_pipeline() {
        let den = denoiser();
        let base = make_schedule(1000, 50).unwrap();
        let crf = CrfParams::identity(&CrfConfig::default()).unwrap();
        let c = TextEncoder::new(8, 8, 0).condition(5).unwrap();
        let cfg = PipelineConfig::default();
        let (a, cost) = hybrid_sample(&c, 4, &cfg, &den, &crf, &base, (4, 4, 4)).unwrap();
        let (b, _) = hybrid_sample(&c, 4, &cfg.truncated(), &den, &crf, &base, (4, 4, 4)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert!(cost.crf_flops > 0);
        let (again, _) = hybrid_sample(&c, 4, &cfg, &den, &crf, &base, (4, 4, 4)).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn constant_latent_has_zero_variance() {
        let z = LatentGrid::filled(3, 3, 2, 0.7);
        assert!(z.mean_variance().1.abs() < 1e-15);
        let den = denoiser();
        let s = make_schedule(1000, 5).unwrap();
        assert!(variance_curve(GuidedDenoiser::new(&den, 1.0), &s, (4, 4, 4), &[]).is_err());
    }

    #[test]
    fn identity_crf_does_not_move() {
        let crf = CrfParams::identity(&CrfConfig::default()).unwrap();
        let x = LatentGrid::randn(5, 5, 4, &mut ChaCha8Rng::seed_from_u64(1));
        let c = TextEncoder::new(8, 8, 0).condition(0).unwrap();
        let curve = convergence_curve(&x, &c, &crf, 6).unwrap();
        assert_eq!(curve.rel_changes.len(), 6);
        assert_eq!(curve.snapshots.len(), 7);
        assert!(curve.rel_changes.iter().all(|&r| r < 1e-12));
        assert!(convergence_curve(&x, &c, &crf, 0).unwrap().rel_changes.is_empty());
        assert_eq!(curve.change_at(0), None);
    }
}
