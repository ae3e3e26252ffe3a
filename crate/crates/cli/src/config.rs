//! The TOML run configuration. Every section and field is optional; absent
//! values take the desk defaults.

use std::path::Path;

use latentcrf::crf::CrfConfig;
use latentcrf::metrics::ProbeConfig;
use latentcrf::pipeline::PipelineConfig;
use latentcrf::surrogate::{DatasetSpec, DenoiserConfig, DenoiserTrainConfig};
use latentcrf::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Length of the training timestep table.
    pub t_train: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_train: 1000 }
    }
}

/// Sample counts for the evaluation and diagnostic commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Fraction of the dataset held out from training.
    pub heldout_fraction: f64,
    /// Teacher chains used as distillation pairs.
    pub distill_pairs: usize,
    /// Additional teacher chains used only to score distillation.
    pub distill_heldout: usize,
    /// Teacher generations forming the Fréchet reference set.
    pub reference_samples: usize,
    /// Candidate generations per seed for the Fréchet comparison.
    pub samples: usize,
    /// Independent candidate sets.
    pub seeds: usize,
    pub prompts: usize,
    pub seeds_per_prompt: usize,
    pub variance_generations: usize,
    pub convergence_inputs: usize,
    pub convergence_iters: usize,
    /// Generations per timed batch.
    pub bench_batch: usize,
    pub bench_reps: usize,
    pub bench_warmup: usize,
    /// Generations written by `sample`.
    pub sample_count: usize,
    /// Sparse-stage step counts swept by `ablate`.
    pub ablate_pre_steps: Vec<usize>,
    /// Dense-stage step counts swept by `ablate`.
    pub ablate_post_steps: Vec<usize>,
    /// Generations per `ablate` cell and teacher reference size.
    pub ablate_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            heldout_fraction: 0.125,
            distill_pairs: 1024,
            distill_heldout: 128,
            reference_samples: 2048,
            samples: 2048,
            seeds: 3,
            prompts: 64,
            seeds_per_prompt: 16,
            variance_generations: 256,
            convergence_inputs: 256,
            convergence_iters: 10,
            bench_batch: 32,
            bench_reps: 3,
            bench_warmup: 1,
            sample_count: 16,
            ablate_pre_steps: vec![27, 29, 31, 33, 35],
            ablate_post_steps: vec![1, 2, 3],
            ablate_samples: 512,
        }
    }
}

/// Sizes and tolerances for the numerical self-checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub energy_instances: usize,
    pub max_side: usize,
    pub max_channels: usize,
    pub higher_order_instances: usize,
    pub phi_points: usize,
    pub oracle_instances: usize,
    pub backprop_problems: usize,
    pub sce_points: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            energy_instances: 100,
            max_side: 6,
            max_channels: 4,
            higher_order_instances: 50,
            phi_points: 1000,
            oracle_instances: 20,
            backprop_problems: 3,
            sce_points: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DatasetSpec,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub denoiser_train: DenoiserTrainConfig,
    pub crf: CrfConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
            None => Ok(Self::default()),
        }
    }

    /// Sets the run seed and every component seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.denoiser_train.seed = seed;
        self.train.seed = seed;
        self.pipeline.seed = seed;
        self.probe.seed = seed;
        self
    }

    /// `section.key`/value pairs, keys sorted within each section.
    pub fn flatten(&self) -> CliResult<Vec<(String, String)>> {
        let table = toml::Table::try_from(self).map_err(|e| CliError::Config(e.to_string()))?;
        let mut out = Vec::new();
        flatten_into("", &toml::Value::Table(table), &mut out);
        Ok(out)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Sanity checks that cut across sections.
    pub fn validate(&self) -> CliResult<()> {
        let (d, c) = (self.data.channels, self.data.cond_dim);
        let mismatch = [
            ("denoiser.channels", self.denoiser.channels, d),
            ("denoiser.cond_dim", self.denoiser.cond_dim, c),
            ("crf.channels", self.crf.channels, d),
            ("crf.cond_dim", self.crf.cond_dim, c),
            ("train.discriminator.channels", self.train.discriminator.channels, d),
        ]
        .into_iter()
        .find(|(_, a, b)| a != b);
        if let Some((name, a, b)) = mismatch {
            return Err(CliError::Config(format!("{name} = {a} but data has {b}")));
        }
        if !(0.0..1.0).contains(&self.eval.heldout_fraction) {
            return Err(CliError::Config("eval.heldout_fraction must lie in [0, 1)".into()));
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.data.height, self.data.width, self.data.channels)
    }
}

fn flatten_into(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        toml::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
