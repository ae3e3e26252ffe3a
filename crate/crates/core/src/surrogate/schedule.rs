//! Cumulative signal ratios and DDIM timestep subsets.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::LatentGrid;

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// A cosine `alpha_bar` table shared by every sampling subset derived from
/// it, plus one such subset.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    table: Arc<Vec<f64>>,
    steps: Vec<usize>,
}

/// `alpha_bar` for `T` training timesteps. Index `t` holds
/// `f(t + 1) / f(0)` with `f(u) = cos^2(((u / T) + s) / (1 + s) * pi / 2)`,
/// built as a product of per-step retentions clipped at `1 - 0.999`, so it
/// stays strictly positive and strictly decreasing.
pub fn cosine_alpha_bar(t_train: usize) -> Vec<f64> {
    let f = |u: f64| {
        let x = (u / t_train as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0.0);
    let mut out = Vec::with_capacity(t_train);
    let mut prev = 1.0;
    for t in 0..t_train {
        let target = f((t + 1) as f64) / f0;
        let beta = (1.0 - target / prev).clamp(0.0, MAX_BETA);
        let cur = prev * (1.0 - beta);
        out.push(cur);
        prev = cur;
    }
    out
}

/// Evenly spaced "leading" subset `floor(k * T / S)`, `k = 0..S`.
pub fn timestep_subset(t_train: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_train {
        return Err(Error::invalid(format!(
            "sampling steps must be in 1..={t_train}, got {steps}"
        )));
    }
    Ok((0..steps).map(|k| k * t_train / steps).collect())
}

pub fn make_schedule(t_train: usize, steps: usize) -> Result<NoiseSchedule> {
    if t_train == 0 {
        return Err(Error::invalid("training timesteps must be positive"));
    }
    Ok(NoiseSchedule {
        table: Arc::new(cosine_alpha_bar(t_train)),
        steps: timestep_subset(t_train, steps)?,
    })
}

impl NoiseSchedule {
    /// Another subset over the same table.
    pub fn with_steps(&self, steps: usize) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule {
            table: Arc::clone(&self.table),
            steps: timestep_subset(self.t_train(), steps)?,
        })
    }

    pub fn t_train(&self) -> usize {
        self.table.len()
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.table
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.table
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside schedule of {}", self.t_train())))
    }

    /// `alpha_bar` for an optional timestep, where `None` is the clean end.
    pub fn alpha_bar_or_clean(&self, t: Option<usize>) -> Result<f64> {
        t.map_or(Ok(1.0), |t| self.alpha_bar(t))
    }

    /// Sampling timesteps in increasing diffusion time.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Timestep processed by sampling step `i` (0-based, from pure noise),
    /// and the timestep it lands on (`None` once clean).
    pub fn step_pair(&self, i: usize) -> Result<(usize, Option<usize>)> {
        let s = self.steps.len();
        if i >= s {
            return Err(Error::invalid(format!("sampling step {i} outside {s}-step schedule")));
        }
        let k = s - 1 - i;
        Ok((self.steps[k], k.checked_sub(1).map(|j| self.steps[j])))
    }

    /// Timestep of the state after `i` sampling steps (`None` when clean).
    pub fn state_timestep(&self, i: usize) -> Result<Option<usize>> {
        let s = self.steps.len();
        if i > s {
            return Err(Error::invalid(format!("state {i} outside {s}-step schedule")));
        }
        Ok((i < s).then(|| self.steps[s - 1 - i]))
    }
}

/// Deterministic DDIM update from `alpha_bar_t` to `alpha_bar_prev`.
pub fn ddim_update(z: &LatentGrid, eps: &LatentGrid, ab_t: f64, ab_prev: f64) -> Result<LatentGrid> {
    z.check_same_shape(eps, "DDIM step")?;
    if ab_t == ab_prev {
        return Ok(z.clone());
    }
    let (st, nt) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sp, np) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(z.zip_map(eps, |zv, ev| {
        let x0 = (zv - nt * ev) / st;
        sp * x0 + np * ev
    }))
}

/// `ddim_step(z_t, eps_hat, t, t_prev)` with `t_prev = None` for the clean end.
pub fn ddim_step(
    z: &LatentGrid,
    eps: &LatentGrid,
    t: usize,
    t_prev: Option<usize>,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(Error::invalid(format!("DDIM target {tp} is not earlier than {t}")));
        }
    }
    ddim_update(z, eps, schedule.alpha_bar(t)?, schedule.alpha_bar_or_clean(t_prev)?)
}

/// `eps_u + scale * (eps_c - eps_u)`.
pub fn cfg_combine(eps_cond: &LatentGrid, eps_uncond: &LatentGrid, scale: f64) -> Result<LatentGrid> {
    eps_cond.check_same_shape(eps_uncond, "guidance")?;
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    Ok(eps_uncond.zip_map(eps_cond, |u, c| u + scale * (c - u)))
}
