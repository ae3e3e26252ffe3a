//! Procedural class-conditional latent grids.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, TextCondition, TextEncoder};
use crate::params::{take_tensor, NamedTensor};

pub const DATASET_KIND: &str = "dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub cond_dim: usize,
    pub size: usize,
    /// Standard deviation of the i.i.d. texture noise.
    pub texture_noise: f64,
    /// Standard deviation of a per-sample offset shared by all sites.
    pub offset_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 4,
            num_classes: 8,
            cond_dim: 8,
            size: 4096,
            texture_noise: 0.1,
            offset_std: 0.6,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.size == 0 {
            return Err(Error::invalid("dataset needs at least one class and one sample"));
        }
        if self.height < 2 || self.width < 2 || self.channels == 0 || self.cond_dim == 0 {
            return Err(Error::invalid("dataset grid must be at least 2x2 with one channel"));
        }
        if self.texture_noise < 0.0 || self.offset_std < 0.0 {
            return Err(Error::invalid("noise levels must be non-negative"));
        }
        Ok(())
    }
}

/// Per-channel affine map applied after generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(latents: &[LatentGrid]) -> Result<Self> {
        let first = latents.first().ok_or_else(|| Error::invalid("no latents to standardize"))?;
        let d = first.channels();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0usize;
        for z in latents {
            z.check_same_shape(first, "standardization")?;
            for site in z.as_slice().chunks_exact(d) {
                for ch in 0..d {
                    sum[ch] += site[ch];
                    sq[ch] += site[ch] * site[ch];
                }
            }
            n += z.sites();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(1e-12).sqrt())
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, z: &mut LatentGrid) {
        let d = self.mean.len();
        for site in z.as_mut_slice().chunks_exact_mut(d) {
            for ch in 0..d {
                site[ch] = (site[ch] - self.mean[ch]) / self.std[ch];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub latents: Vec<LatentGrid>,
    pub labels: Vec<usize>,
    pub encoder: TextEncoder,
    pub standardizer: Standardizer,
}

/// One raw (unstandardized) sample of class `k`.
fn render(spec: &DatasetSpec, k: usize, rng: &mut ChaCha8Rng) -> LatentGrid {
    let (h, w, d) = (spec.height, spec.width, spec.channels);
    let classes = spec.num_classes as f64;
    let kf = k as f64;
    // Stripes: orientation cycles through four directions, frequency
    // doubles for the upper half of the classes.
    let theta = (k % 4) as f64 * PI / 4.0;
    let freq = if 2 * k < spec.num_classes { 1.0 } else { 2.0 } * 2.0 * PI / h.max(w) as f64;
    let phase = rng.gen_range(-0.5..0.5);
    // Gradient direction spread around the circle.
    let phi = 2.0 * PI * kf / classes;
    // Rectangle anchored on a class-specific cell of a coarse lattice.
    let cols = (spec.num_classes as f64).sqrt().ceil() as usize;
    let rows = spec.num_classes.div_ceil(cols);
    let (rh, rw) = ((h / 2).max(1), (w / 2).max(1));
    let cell_r = (k / cols) as f64 / rows.max(1) as f64;
    let cell_c = (k % cols) as f64 / cols as f64;
    let r0 = ((cell_r * (h - rh) as f64).round() as isize + rng.gen_range(-1..=1)).clamp(0, (h - rh) as isize) as usize;
    let c0 = ((cell_c * (w - rw) as f64).round() as isize + rng.gen_range(-1..=1)).clamp(0, (w - rw) as isize) as usize;
    let offset = spec.offset_std * rng.sample::<f64, _>(StandardNormal);
    let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let scale = 2.0 / h.max(w) as f64;

    let mut z = LatentGrid::zeros(h, w, d);
    for r in 0..h {
        for c in 0..w {
            let (rf, cf) = (r as f64, c as f64);
            let stripes = (freq * (rf * theta.sin() + cf * theta.cos()) + phase).sin();
            let gradient = scale * ((rf - cy) * phi.sin() + (cf - cx) * phi.cos());
            let rect = if (r0..r0 + rh).contains(&r) && (c0..c0 + rw).contains(&c) { 1.0 } else { -0.3 };
            let base = [stripes, gradient, rect, 0.5 * (stripes * rect + gradient)];
            for ch in 0..d {
                let noise = spec.texture_noise * rng.sample::<f64, _>(StandardNormal);
                z.set(r, c, ch, base[ch % base.len()] + offset + noise);
            }
        }
    }
    z
}

/// Seeded dataset with balanced class labels, standardized per channel.
pub fn gen_synthetic_latents(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels: Vec<usize> = (0..spec.size).map(|i| i % spec.num_classes).collect();
    let mut latents: Vec<LatentGrid> = labels.iter().map(|&k| render(spec, k, &mut rng)).collect();
    let standardizer = Standardizer::fit(&latents)?;
    for z in latents.iter_mut() {
        standardizer.apply(z);
    }
    Ok(Dataset {
        spec: spec.clone(),
        latents,
        labels,
        encoder: TextEncoder::new(spec.num_classes, spec.cond_dim, spec.seed),
        standardizer,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn condition(&self, i: usize) -> TextCondition {
        self.encoder
            .condition(self.labels[i])
            .expect("labels are generated within the class range")
    }

    /// Splits off the last `fraction` of samples as a held-out set.
    pub fn split(&self, fraction: f64) -> (Dataset, Dataset) {
        let n_hold = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - n_hold.min(self.len());
        let part = |range: std::ops::Range<usize>| Dataset {
            spec: self.spec.clone(),
            latents: self.latents[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
            encoder: self.encoder.clone(),
            standardizer: self.standardizer.clone(),
        };
        (part(0..cut), part(cut..self.len()))
    }

    pub fn to_container(&self) -> Container {
        let s = &self.spec;
        let mut c = Container::new(DATASET_KIND)
            .with_meta("height", s.height)
            .with_meta("width", s.width)
            .with_meta("channels", s.channels)
            .with_meta("num_classes", s.num_classes)
            .with_meta("cond_dim", s.cond_dim)
            .with_meta("size", s.size)
            .with_meta("texture_noise", s.texture_noise)
            .with_meta("offset_std", s.offset_std)
            .with_meta("seed", s.seed);
        let flat: Vec<f64> = self.latents.iter().flat_map(|z| z.as_slice().iter().copied()).collect();
        c.push(NamedTensor::new("latents", vec![self.len(), s.height, s.width, s.channels], flat));
        c.push(NamedTensor::vector("labels", self.labels.iter().map(|&l| l as f64).collect()));
        let emb: Vec<f64> = self.encoder.table().iter().flatten().copied().collect();
        c.push(NamedTensor::new("embeddings", vec![s.num_classes, s.cond_dim], emb));
        c.push(NamedTensor::vector("mean", self.standardizer.mean.clone()));
        c.push(NamedTensor::vector("std", self.standardizer.std.clone()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(DATASET_KIND)?;
        let num = |key: &str| -> Result<f64> {
            c.meta(key)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::invalid(format!("dataset metadata '{key}' missing")))
        };
        let spec = DatasetSpec {
            height: num("height")? as usize,
            width: num("width")? as usize,
            channels: num("channels")? as usize,
            num_classes: num("num_classes")? as usize,
            cond_dim: num("cond_dim")? as usize,
            size: num("size")? as usize,
            texture_noise: num("texture_noise")?,
            offset_std: num("offset_std")?,
            seed: c
                .meta("seed")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::invalid("dataset metadata 'seed' missing"))?,
        };
        let per = spec.height * spec.width * spec.channels;
        let flat = take_tensor(&c.tensors, "latents", spec.size * per)?;
        let latents = flat
            .chunks_exact(per)
            .map(|v| LatentGrid::from_vec(spec.height, spec.width, spec.channels, v.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let labels = take_tensor(&c.tensors, "labels", spec.size)?
            .into_iter()
            .map(|v| v as usize)
            .collect();
        let emb = take_tensor(&c.tensors, "embeddings", spec.num_classes * spec.cond_dim)?;
        let encoder = TextEncoder::from_table(emb.chunks_exact(spec.cond_dim).map(<[f64]>::to_vec).collect())?;
        let standardizer = Standardizer {
            mean: take_tensor(&c.tensors, "mean", spec.channels)?,
            std: take_tensor(&c.tensors, "std", spec.channels)?,
        };
        Ok(Self {
            spec,
            latents,
            labels,
            encoder,
            standardizer,
        })
    }
}
