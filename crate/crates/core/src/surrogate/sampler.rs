//! Guided deterministic DDIM sampling with optional trajectory capture.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{LatentGrid, TextCondition};
use crate::surrogate::denoiser::DenoiserParams;
use crate::surrogate::schedule::{cfg_combine, ddim_step, NoiseSchedule};

/// Samples per denoiser call; bounds the im2col working set.
const CHUNK: usize = 128;

/// Seeded standard-normal starting latent.
pub fn initial_noise(height: usize, width: usize, channels: usize, seed: u64) -> LatentGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentGrid::randn(height, width, channels, &mut rng)
}

/// A trained denoiser with a fixed guidance scale.
#[derive(Debug, Clone, Copy)]
pub struct GuidedDenoiser<'a> {
    pub denoiser: &'a DenoiserParams,
    pub guidance: f64,
}

impl<'a> GuidedDenoiser<'a> {
    pub fn new(denoiser: &'a DenoiserParams, guidance: f64) -> Self {
        Self { denoiser, guidance }
    }

    /// Guided noise estimates for a batch at timestep `t` with signal level
    /// `ab`. The conditional and unconditional branches share a single
    /// stacked forward pass.
    pub fn eps(&self, zs: &[LatentGrid], t: usize, ab: f64, conds: &[TextCondition]) -> Result<Vec<LatentGrid>> {
        if zs.len() != conds.len() {
            return Err(Error::shape("latent and condition batch sizes differ"));
        }
        let mut out = Vec::with_capacity(zs.len());
        for (zc, cc) in zs.chunks(CHUNK).zip(conds.chunks(CHUNK)) {
            let need_cond = self.guidance != 0.0;
            let need_uncond = self.guidance != 1.0;
            let mut batch = Vec::with_capacity(2 * zc.len());
            let mut embs = Vec::with_capacity(2 * zc.len());
            if need_cond {
                batch.extend_from_slice(zc);
                embs.extend(cc.iter().map(|c| c.embedding.clone()));
            }
            if need_uncond {
                batch.extend_from_slice(zc);
                embs.extend(cc.iter().map(|c| vec![0.0; c.dim()]));
            }
            let ts = vec![t; batch.len()];
            let abs = vec![ab; batch.len()];
            let pred = self.denoiser.predict_eps(&batch, &ts, &abs, &embs)?;
            match (need_cond, need_uncond) {
                (true, true) => {
                    let (c, u) = pred.split_at(zc.len());
                    for (ec, eu) in c.iter().zip(u) {
                        out.push(cfg_combine(ec, eu, self.guidance)?);
                    }
                }
                _ => out.extend(pred),
            }
        }
        Ok(out)
    }

    /// Sampling steps `steps` of `schedule` applied to a batch of states.
    /// `observe(k, states)` sees the state after every step `k`.
    pub fn run(
        &self,
        schedule: &NoiseSchedule,
        mut states: Vec<LatentGrid>,
        conds: &[TextCondition],
        steps: std::ops::Range<usize>,
        mut observe: impl FnMut(usize, &[LatentGrid]),
    ) -> Result<Vec<LatentGrid>> {
        if steps.end > schedule.num_steps() {
            return Err(Error::invalid(format!(
                "steps up to {} requested from a {}-step schedule",
                steps.end,
                schedule.num_steps()
            )));
        }
        for i in steps {
            let (t, t_prev) = schedule.step_pair(i)?;
            let eps = self.eps(&states, t, schedule.alpha_bar(t)?, conds)?;
            states = states
                .iter()
                .zip(&eps)
                .map(|(z, e)| ddim_step(z, e, t, t_prev, schedule))
                .collect::<Result<Vec<_>>>()?;
            observe(i + 1, &states);
        }
        Ok(states)
    }
}

/// Captured states of one teacher chain.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTrajectory {
    /// `(k, state after k steps)` for each requested `k`, in request order.
    pub captures: Vec<(usize, LatentGrid)>,
    pub final_z: LatentGrid,
}

impl TeacherTrajectory {
    pub fn capture(&self, k: usize) -> Option<&LatentGrid> {
        self.captures.iter().find(|(s, _)| *s == k).map(|(_, z)| z)
    }
}

/// Full-schedule teacher chains for `(condition, seed)` requests.
/// `capture_at` lists state indices in `0..=S` (0 is the initial noise).
pub fn sample_teacher_batch(
    model: GuidedDenoiser<'_>,
    schedule: &NoiseSchedule,
    shape: (usize, usize, usize),
    requests: &[(TextCondition, u64)],
    capture_at: &[usize],
) -> Result<Vec<TeacherTrajectory>> {
    let s = schedule.num_steps();
    if let Some(&bad) = capture_at.iter().find(|&&k| k > s) {
        return Err(Error::invalid(format!("capture step {bad} outside {s}-step schedule")));
    }
    let (h, w, d) = shape;
    let conds: Vec<TextCondition> = requests.iter().map(|(c, _)| c.clone()).collect();
    let init: Vec<LatentGrid> = requests.iter().map(|&(_, seed)| initial_noise(h, w, d, seed)).collect();
    let mut captured: Vec<Vec<(usize, LatentGrid)>> = vec![Vec::new(); requests.len()];
    let mut record = |k: usize, states: &[LatentGrid]| {
        for &want in capture_at {
            if want == k {
                for (slot, z) in captured.iter_mut().zip(states) {
                    slot.push((k, z.clone()));
                }
            }
        }
    };
    record(0, &init);
    let finals = model.run(schedule, init, &conds, 0..s, &mut record)?;
    // Restore request order for each sample's captures.
    Ok(captured
        .into_iter()
        .zip(finals)
        .map(|(mut caps, final_z)| {
            caps.sort_by_key(|(k, _)| capture_at.iter().position(|c| c == k));
            TeacherTrajectory { captures: caps, final_z }
        })
        .collect())
}

pub fn sample_teacher(
    model: GuidedDenoiser<'_>,
    schedule: &NoiseSchedule,
    shape: (usize, usize, usize),
    c: &TextCondition,
    seed: u64,
    capture_at: &[usize],
) -> Result<TeacherTrajectory> {
    let mut out = sample_teacher_batch(model, schedule, shape, &[(c.clone(), seed)], capture_at)?;
    Ok(out.remove(0))
}

/// The distillation pair capture index `ceil(0.8 * S)`.
pub fn distill_capture_step(steps: usize) -> usize {
    (4 * steps).div_ceil(5)
}
