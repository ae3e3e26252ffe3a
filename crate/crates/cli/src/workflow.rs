//! Training stages and evaluations shared by the subcommands and the
//! acceptance suite. Every function is deterministic given the run config.

use latentcrf::crf::CrfParams;
use latentcrf::metrics::{diversity_eval, frechet_from_features, throughput_bench, FeatureExtractor, Timing};
use latentcrf::pipeline::{convergence_curve, crf_stage, variance_curve, HybridPipeline, StageCost};
use latentcrf::surrogate::{
    gen_synthetic_latents, heldout_noise_mse, make_schedule, sample_teacher_batch, train_denoiser, Dataset,
    DenoiserParams, GuidedDenoiser, NoiseSchedule,
};
use latentcrf::train::{
    evaluate_denoising, evaluate_distillation, teacher_pairs, train_distill, train_stage1, DenoiseEval,
    DistillPair, DistillResult, Stage1Result,
};
use latentcrf::{LatentGrid, Result, TextCondition, TextEncoder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

/// Independent seed streams, so that no two uses of generated noise overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Distill = 1,
    DistillHeldout = 2,
    Reference = 3,
    Candidate = 4,
    Diversity = 5,
    Variance = 6,
    Convergence = 7,
    Bench = 8,
    Sample = 9,
    Ablate = 10,
}

/// The `i`-th noise seed of `stream` for a run seeded with `run`.
pub fn stream_seed(run: u64, stream: Stream, i: u64) -> u64 {
    run.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((stream as u64) << 40) ^ i
}

/// `n` requests cycling through the classes, seeded from `stream`.
pub fn requests(
    encoder: &TextEncoder,
    run: u64,
    stream: Stream,
    offset: u64,
    n: usize,
) -> Result<Vec<(TextCondition, u64)>> {
    (0..n)
        .map(|i| {
            let c = encoder.condition(i % encoder.num_classes())?;
            Ok((c, stream_seed(run, stream, offset + i as u64)))
        })
        .collect()
}

/// The dense schedule; the sparse one is derived from the same table.
pub fn base_schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    make_schedule(cfg.schedule.t_train, cfg.pipeline.post_schedule)
}

pub fn pipeline(cfg: &RunConfig) -> Result<HybridPipeline> {
    HybridPipeline::new(cfg.pipeline.clone(), &base_schedule(cfg)?)
}

pub fn gen_data(cfg: &RunConfig) -> Result<Dataset> {
    gen_synthetic_latents(&cfg.data)
}

/// `(train, heldout)`.
pub fn split(cfg: &RunConfig, data: &Dataset) -> (Dataset, Dataset) {
    data.split(cfg.eval.heldout_fraction)
}

#[derive(Debug, Clone)]
pub struct SurrogateOutcome {
    pub denoiser: DenoiserParams,
    pub losses: Vec<f64>,
    pub skipped_steps: usize,
    /// Held-out noise MSE of the model and of the zero predictor.
    pub noise_mse: (f64, f64),
}

impl SurrogateOutcome {
    /// Relative MSE reduction over the zero predictor.
    pub fn improvement(&self) -> f64 {
        1.0 - self.noise_mse.0 / self.noise_mse.1
    }
}

pub fn train_surrogate(cfg: &RunConfig, train: &Dataset, heldout: &Dataset) -> Result<SurrogateOutcome> {
    let schedule = base_schedule(cfg)?;
    let res = train_denoiser(train, &schedule, &cfg.denoiser, &cfg.denoiser_train)?;
    let noise_mse = if heldout.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        heldout_noise_mse(&res.params, heldout, &schedule, 2048, cfg.seed)?
    };
    Ok(SurrogateOutcome {
        denoiser: res.params,
        losses: res.losses,
        skipped_steps: res.skipped_steps,
        noise_mse,
    })
}

pub fn fit_features(cfg: &RunConfig, train: &Dataset) -> Result<FeatureExtractor> {
    FeatureExtractor::fit(&train.latents, &train.labels, train.spec.num_classes, &cfg.probe)
}

pub fn init_crf(cfg: &RunConfig) -> Result<CrfParams> {
    CrfParams::init(&cfg.crf, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Noise level of the CRF input: the state leaving the sparse schedule.
pub fn insertion_alpha_bar(cfg: &RunConfig) -> Result<f64> {
    Ok(pipeline(cfg)?.handoff.pre_alpha_bar)
}

pub fn stage1(cfg: &RunConfig, train: &Dataset) -> Result<Stage1Result> {
    train_stage1(train, &init_crf(cfg)?, insertion_alpha_bar(cfg)?, &cfg.train)
}

/// Held-out denoising with noise ratios drawn from the training window.
pub fn denoise_eval(cfg: &RunConfig, crf: &CrfParams, heldout: &Dataset) -> Result<DenoiseEval> {
    evaluate_denoising(crf, heldout, insertion_alpha_bar(cfg)?, cfg.train.alpha_width, cfg.seed)
}

/// The same evaluation at exactly the insertion noise level.
pub fn denoise_eval_fixed(cfg: &RunConfig, crf: &CrfParams, heldout: &Dataset) -> Result<DenoiseEval> {
    evaluate_denoising(crf, heldout, insertion_alpha_bar(cfg)?, 0.0, cfg.seed)
}

pub fn distill_pairs(
    cfg: &RunConfig,
    denoiser: &DenoiserParams,
    encoder: &TextEncoder,
    stream: Stream,
    n: usize,
) -> Result<Vec<DistillPair>> {
    let model = GuidedDenoiser::new(denoiser, cfg.pipeline.guidance);
    let reqs = requests(encoder, cfg.seed, stream, 0, n)?;
    teacher_pairs(model, &base_schedule(cfg)?, cfg.shape(), &reqs)
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub result: DistillResult,
    /// Held-out mean `||z_f - M(z_s)||` before and after distillation.
    pub before: f64,
    pub after: f64,
    /// Held-out mean `||z_f - z_s||`.
    pub identity: f64,
}

pub fn distill(
    cfg: &RunConfig,
    stage1_crf: &CrfParams,
    denoiser: &DenoiserParams,
    encoder: &TextEncoder,
) -> Result<DistillOutcome> {
    let pairs = distill_pairs(cfg, denoiser, encoder, Stream::Distill, cfg.eval.distill_pairs)?;
    let held = distill_pairs(cfg, denoiser, encoder, Stream::DistillHeldout, cfg.eval.distill_heldout)?;
    let result = train_distill(&pairs, stage1_crf, &cfg.train)?;
    let (before, identity, after) = if held.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let (before, identity) = evaluate_distillation(stage1_crf, &held)?;
        (before, identity, evaluate_distillation(&result.crf, &held)?.0)
    };
    Ok(DistillOutcome {
        result,
        before,
        after,
        identity,
    })
}

/// Full-schedule teacher generations for `reqs`.
pub fn teacher_samples(
    cfg: &RunConfig,
    denoiser: &DenoiserParams,
    reqs: &[(TextCondition, u64)],
) -> Result<Vec<LatentGrid>> {
    let model = GuidedDenoiser::new(denoiser, cfg.pipeline.guidance);
    Ok(sample_teacher_batch(model, &base_schedule(cfg)?, cfg.shape(), reqs, &[])?
        .into_iter()
        .map(|t| t.final_z)
        .collect())
}

/// Hybrid and truncated generations for the same requests. Both share the
/// sparse-stage states.
pub fn hybrid_and_truncated(
    cfg: &RunConfig,
    denoiser: &DenoiserParams,
    crf: &CrfParams,
    reqs: &[(TextCondition, u64)],
) -> Result<(Vec<LatentGrid>, Vec<LatentGrid>)> {
    let p = pipeline(cfg)?;
    let model = GuidedDenoiser::new(denoiser, cfg.pipeline.guidance);
    let mut cost = StageCost::default();
    let pre = p.run_pre(model, cfg.shape(), reqs, &mut cost)?;
    let hybrid = p.finish(model, Some(crf), pre.clone(), reqs, &mut cost)?;
    let truncated = p.finish(model, None, pre, reqs, &mut cost)?;
    Ok((hybrid, truncated))
}

/// Fréchet distances of one candidate seed set to the teacher reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedFrechet {
    pub hybrid: f64,
    pub truncated: f64,
    /// Probe accuracy on the generations (text-alignment substitute).
    pub hybrid_probe: f64,
    pub truncated_probe: f64,
}

impl SeedFrechet {
    /// Relative reduction of the hybrid distance against the truncated one.
    pub fn reduction(&self) -> f64 {
        1.0 - self.hybrid / self.truncated
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrechetAblation {
    pub per_seed: Vec<SeedFrechet>,
    pub teacher_probe: f64,
}

fn labels(reqs: &[(TextCondition, u64)]) -> Vec<usize> {
    reqs.iter().map(|(c, _)| c.class_id).collect()
}

pub fn frechet_ablation(
    cfg: &RunConfig,
    denoiser: &DenoiserParams,
    crf: &CrfParams,
    features: &FeatureExtractor,
    encoder: &TextEncoder,
) -> Result<FrechetAblation> {
    let ref_reqs = requests(encoder, cfg.seed, Stream::Reference, 0, cfg.eval.reference_samples)?;
    let reference = teacher_samples(cfg, denoiser, &ref_reqs)?;
    let teacher_probe = features.accuracy(&reference, &labels(&ref_reqs))?;
    let ref_feats = features.embed_all(&reference)?;
    drop(reference);
    let per_seed = (0..cfg.eval.seeds as u64)
        .map(|s| {
            let reqs = requests(encoder, cfg.seed, Stream::Candidate, s << 32, cfg.eval.samples)?;
            let (hybrid, truncated) = hybrid_and_truncated(cfg, denoiser, crf, &reqs)?;
            let lab = labels(&reqs);
            Ok(SeedFrechet {
                hybrid: frechet_from_features(&features.embed_all(&hybrid)?, &ref_feats)?,
                truncated: frechet_from_features(&features.embed_all(&truncated)?, &ref_feats)?,
                hybrid_probe: features.accuracy(&hybrid, &lab)?,
                truncated_probe: features.accuracy(&truncated, &lab)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrechetAblation { per_seed, teacher_probe })
}

/// Mean Vendi scores of the teacher and of the hybrid pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diversity {
    pub teacher: f64,
    pub hybrid: f64,
}

/// `eval.prompts` prompts cycle through the classes; each pass over the
/// classes uses a fresh block of seeds, so repeated classes are distinct
/// prompts.
pub fn diversity(
    cfg: &RunConfig,
    denoiser: &DenoiserParams,
    crf: &CrfParams,
    features: &FeatureExtractor,
    encoder: &TextEncoder,
) -> Result<Diversity> {
    let k = encoder.num_classes();
    let per = cfg.eval.seeds_per_prompt;
    let p = pipeline(cfg)?;
    let model = GuidedDenoiser::new(denoiser, cfg.pipeline.guidance);
    let (mut teacher, mut hybrid) = (0.0, 0.0);
    let mut done = 0;
    let mut block = 0u64;
    while done < cfg.eval.prompts {
        let count = k.min(cfg.eval.prompts - done);
        let prompts = (0..count).map(|c| encoder.condition(c)).collect::<Result<Vec<_>>>()?;
        let seeds: Vec<u64> = (0..per as u64)
            .map(|j| stream_seed(cfg.seed, Stream::Diversity, (block << 32) | j))
            .collect();
        let t = diversity_eval(&prompts, &seeds, |reqs| features.embed_all(&teacher_samples(cfg, denoiser, reqs)?))?;
        let h = diversity_eval(&prompts, &seeds, |reqs| {
            features.embed_all(&p.sample_batch(model, crf, cfg.shape(), reqs)?.0)
        })?;
        teacher += t * count as f64;
        hybrid += h * count as f64;
        done += count;
        block += 1;
    }
    let n = done.max(1) as f64;
    Ok(Diversity {
        teacher: teacher / n,
        hybrid: hybrid / n,
    })
}

/// Wall-clock per batch of `eval.bench_batch` generations, and the FLOPs of
/// one CRF and one denoiser call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Speed {
    pub hybrid: Timing,
    pub truncated: Timing,
    pub teacher: Timing,
    /// One guided denoiser step over the batch.
    pub denoiser_step: Timing,
    /// One CRF application over the batch.
    pub crf: Timing,
    pub crf_flops: u64,
    pub denoiser_flops: u64,
    /// Stage breakdown of the last hybrid batch.
    pub hybrid_cost: StageCost,
}

impl Speed {
    /// The truncated pipeline plus the denoiser step the CRF stands in for.
    pub fn budget_ms(&self) -> f64 {
        self.truncated.mean_ms + self.denoiser_step.mean_ms
    }
}

pub fn speed(cfg: &RunConfig, denoiser: &DenoiserParams, crf: &CrfParams, encoder: &TextEncoder) -> Result<Speed> {
    let reqs = requests(encoder, cfg.seed, Stream::Bench, 0, cfg.eval.bench_batch)?;
    let (reps, warm) = (cfg.eval.bench_reps, cfg.eval.bench_warmup);
    let p = pipeline(cfg)?;
    let truncated_p = HybridPipeline::new(cfg.pipeline.truncated(), &base_schedule(cfg)?)?;
    let model = GuidedDenoiser::new(denoiser, cfg.pipeline.guidance);
    let shape = cfg.shape();
    let mut hybrid_cost = StageCost::default();
    let hybrid = throughput_bench(reps, warm, || {
        hybrid_cost = p.sample_batch(model, crf, shape, &reqs)?.1;
        Ok(())
    })?;
    let truncated = throughput_bench(reps, warm, || truncated_p.sample_batch(model, crf, shape, &reqs).map(|_| ()))?;
    let teacher = throughput_bench(reps, warm, || teacher_samples(cfg, denoiser, &reqs).map(|_| ()))?;
    let mut cost = StageCost::default();
    let states = p.run_pre(model, shape, &reqs, &mut cost)?;
    let conds: Vec<TextCondition> = reqs.iter().map(|(c, _)| c.clone()).collect();
    let t = p.handoff.pre_timestep.unwrap_or(0);
    let ab = p.handoff.pre_alpha_bar;
    let denoiser_step = throughput_bench(reps, warm, || model.eps(&states, t, ab, &conds).map(|_| ()))?;
    let crf_timing = throughput_bench(reps, warm, || crf_stage(crf, &states, &conds).map(|_| ()))?;
    let branches = if model.guidance == 0.0 || model.guidance == 1.0 { 1 } else { 2 };
    Ok(Speed {
        hybrid,
        truncated,
        teacher,
        denoiser_step,
        crf: crf_timing,
        crf_flops: crf.flops_per_call(shape.0, shape.1) as u64,
        denoiser_flops: (branches * denoiser.flops_per_call(shape.0, shape.1)) as u64,
        hybrid_cost,
    })
}

/// Teacher per-step variance over `eval.variance_generations` chains.
pub fn variance(cfg: &RunConfig, denoiser: &DenoiserParams, encoder: &TextEncoder) -> Result<Vec<f64>> {
    let reqs = requests(encoder, cfg.seed, Stream::Variance, 0, cfg.eval.variance_generations)?;
    let model = GuidedDenoiser::new(denoiser, cfg.pipeline.guidance);
    variance_curve(model, &base_schedule(cfg)?, cfg.shape(), &reqs)
}

/// Whether the last `fraction` of a curve never increases.
pub fn tail_non_increasing(curve: &[f64], fraction: f64) -> bool {
    let steps = curve.len().saturating_sub(1);
    let tail = ((fraction * steps as f64).ceil() as usize).min(steps);
    curve[curve.len() - tail - 1..].windows(2).all(|p| p[1] <= p[0])
}

/// Mean-field convergence on the CRF's own input distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Convergence {
    /// Mean relative update per iteration, iterations `1..=max`.
    pub mean_changes: Vec<f64>,
    /// Per input, the largest element difference between the snapshots at
    /// `probe` and `max` iterations.
    pub snapshot_gaps: Vec<f64>,
    pub probe: usize,
}

impl Convergence {
    pub fn change_at(&self, t: usize) -> Option<f64> {
        t.checked_sub(1).and_then(|i| self.mean_changes.get(i).copied())
    }

    pub fn fraction_settled(&self, tol: f64) -> f64 {
        let n = self.snapshot_gaps.len().max(1) as f64;
        self.snapshot_gaps.iter().filter(|&&g| g <= tol).count() as f64 / n
    }
}

/// Inputs are sparse-stage exit states; snapshots are compared at
/// iterations `probe` and `eval.convergence_iters`.
pub fn convergence(
    cfg: &RunConfig,
    denoiser: &DenoiserParams,
    crf: &CrfParams,
    encoder: &TextEncoder,
    probe: usize,
) -> Result<Convergence> {
    let max = cfg.eval.convergence_iters.max(probe);
    let reqs = requests(encoder, cfg.seed, Stream::Convergence, 0, cfg.eval.convergence_inputs)?;
    let p = pipeline(cfg)?;
    let model = GuidedDenoiser::new(denoiser, cfg.pipeline.guidance);
    let states = p.run_pre(model, cfg.shape(), &reqs, &mut StageCost::default())?;
    let mut sums = vec![0.0; max];
    let mut gaps = Vec::with_capacity(states.len());
    for (x, (c, _)) in states.iter().zip(&reqs) {
        let curve = convergence_curve(x, c, crf, max)?;
        for (s, v) in sums.iter_mut().zip(&curve.rel_changes) {
            *s += v;
        }
        gaps.push(curve.snapshots[probe].max_abs_diff(&curve.snapshots[max]));
    }
    let n = states.len().max(1) as f64;
    Ok(Convergence {
        mean_changes: sums.into_iter().map(|s| s / n).collect(),
        snapshot_gaps: gaps,
        probe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_seeds_are_distinct() {
        let a = stream_seed(0, Stream::Reference, 5);
        let b = stream_seed(0, Stream::Candidate, 5);
        let c = stream_seed(1, Stream::Reference, 5);
        assert!(a != b && a != c && b != c);
    }

    #[test]
    fn tail_check_covers_the_final_fifth() {
        let curve = [1.0, 1.2, 1.1, 1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3];
        assert!(tail_non_increasing(&curve, 0.2));
        let bumped = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.25, 0.1];
        assert!(!tail_non_increasing(&bumped, 0.2));
    }
}
