//! AdamW with linear warm-up and cosine decay.

use serde::{Deserialize, Serialize};

use crate::params::Grads;

/// `step_size(s) = peak * min(1, (s + 1) / warmup) * (1 + cos(pi * s / total)) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            peak: lr,
            warmup: 0,
            total: 0,
        }
    }

    pub fn step_size(&self, step: usize) -> f64 {
        let ramp = if self.warmup == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup as f64).min(1.0)
        };
        let decay = if self.total == 0 {
            1.0
        } else {
            let frac = (step as f64 / self.total as f64).min(1.0);
            0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        };
        self.peak * ramp * decay
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied { step_size: f64 },
    /// The gradient held a NaN or infinity; parameters and moments are
    /// unchanged.
    SkippedNonFinite,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamConfig,
    pub schedule: LrSchedule,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Number of applied updates (drives bias correction).
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamConfig, schedule: LrSchedule, shapes: &[usize]) -> Self {
        Self {
            config,
            schedule,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn applied_steps(&self) -> u64 {
        self.t
    }

    /// One update at schedule position `step`.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &Grads, step: usize) -> StepOutcome {
        if !grads.is_finite() {
            return StepOutcome::SkippedNonFinite;
        }
        assert_eq!(params.len(), self.m.len(), "parameter blocks vs optimizer state");
        let lr = self.schedule.step_size(step);
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads.blocks()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + epsilon) + weight_decay * p[i]);
            }
        }
        StepOutcome::Applied { step_size: lr }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_step_size_or_zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0];
        let mut opt = AdamW::new(AdamConfig::default(), LrSchedule::constant(0.0), &[2]);
        opt.step(vec![&mut p], &Grads(vec![vec![0.3, -1.0]]), 0);
        assert_eq!(p, vec![1.0, -2.0]);
        let mut opt = AdamW::new(AdamConfig::default(), LrSchedule::constant(0.1), &[2]);
        opt.step(vec![&mut p], &Grads(vec![vec![0.0, 0.0]]), 0);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_step_size() {
        let mut p = vec![0.5];
        let mut opt = AdamW::new(AdamConfig::default(), LrSchedule::constant(1e-3), &[1]);
        opt.step(vec![&mut p], &Grads(vec![vec![1.0]]), 0);
        // m_hat = 1, v_hat = 1, update = -lr / (1 + eps)
        assert!((p[0] - (0.5 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = vec![0.5];
        let mut opt = AdamW::new(AdamConfig::default(), LrSchedule::constant(1e-3), &[1]);
        let out = opt.step(vec![&mut p], &Grads(vec![vec![f64::NAN]]), 0);
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(p, vec![0.5]);
        assert_eq!(opt.applied_steps(), 0);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LrSchedule {
            peak: 1e-3,
            warmup: 10,
            total: 100,
        };
        assert!((s.step_size(0) - 1e-3 * 0.1 * 0.5 * (1.0 + 1.0)).abs() < 1e-18);
        assert!(s.step_size(9) > s.step_size(0));
        assert!(s.step_size(99) < s.step_size(50));
        assert!(s.step_size(100) == 0.0);
    }
}
