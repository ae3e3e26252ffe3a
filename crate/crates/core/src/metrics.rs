//! Sample-quality and diversity metrics over learned latent features, plus
//! wall-clock benchmarking.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, TextCondition};
use crate::nn::{relu_inplace, Conv2d, Geometry};
use crate::optim::{AdamConfig, AdamW, LrSchedule};
use crate::params::{take_tensor, Grads, NamedTensor};

pub const FEATURES_KIND: &str = "features";

/// Negative eigenvalues down to this (scaled by `max(1, |lambda_max|)`) are
/// treated as round-off and clamped to zero.
const NEG_EIG_TOL: f64 = 1e-8;
/// Eigenvalues below this contribute no entropy.
const VENDI_EIG_FLOOR: f64 = 1e-12;

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::shape(format!("{what} is {}x{}, not square", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 * scale {
                return Err(Error::invalid(format!("{what} is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Eigenvalues of a symmetric PSD matrix with round-off negatives clamped.
fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(m);
    let top = eig.eigenvalues.amax().max(1.0);
    for v in eig.eigenvalues.iter_mut() {
        if *v < -NEG_EIG_TOL * top {
            return Err(Error::invalid(format!("{what} has eigenvalue {v:e}; not positive semi-definite")));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`, computed as
/// `Tr((S1^(1/2) S2 S1^(1/2))^(1/2))` for the cross term so every root is
/// of a symmetric matrix.
pub fn frechet_distance(mu1: &[f64], cov1: &DMatrix<f64>, mu2: &[f64], cov2: &DMatrix<f64>) -> Result<f64> {
    let n = mu1.len();
    if mu2.len() != n || cov1.shape() != (n, n) || cov2.shape() != (n, n) {
        return Err(Error::shape("means and covariances must share one dimension"));
    }
    check_symmetric(cov1, "first covariance")?;
    check_symmetric(cov2, "second covariance")?;
    let mean_term: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b).powi(2)).sum();
    let e1 = psd_eigen(cov1.clone(), "first covariance")?;
    let root1 = &e1.eigenvectors
        * DMatrix::from_diagonal(&e1.eigenvalues.map(f64::sqrt))
        * e1.eigenvectors.transpose();
    let mid = &root1 * cov2 * &root1;
    let mid = (&mid + mid.transpose()) * 0.5;
    let cross: f64 = psd_eigen(mid, "covariance product")?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    Ok((mean_term + cov1.trace() + cov2.trace() - 2.0 * cross).max(0.0))
}

/// Sample mean and unbiased covariance of feature rows.
pub fn gaussian_fit(features: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::invalid("a Gaussian fit needs at least two samples"));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::shape("feature vectors differ in length"));
    }
    let x = DMatrix::from_fn(n, dim, |i, j| features[i][j]);
    let mean: DVector<f64> = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((mean.iter().copied().collect(), cov))
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (m1, c1) = gaussian_fit(a)?;
    let (m2, c2) = gaussian_fit(b)?;
    frechet_distance(&m1, &c1, &m2, &c2)
}

/// `exp(-sum lambda ln lambda)` over the eigenvalues of `K / n`.
pub fn vendi_score(similarity: &DMatrix<f64>) -> Result<f64> {
    let n = similarity.nrows();
    if n == 0 {
        return Err(Error::invalid("empty similarity matrix"));
    }
    check_symmetric(similarity, "similarity matrix")?;
    let eig = psd_eigen(similarity / n as f64, "similarity matrix")?;
    let entropy: f64 = eig
        .eigenvalues
        .iter()
        .filter(|&&l| l >= VENDI_EIG_FLOOR)
        .map(|&l| -l * l.ln())
        .sum();
    Ok(entropy.exp())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        // Zero vectors count as identical to each other only.
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Pairwise cosine similarities with an exact unit diagonal.
pub fn cosine_matrix(features: &[Vec<f64>]) -> DMatrix<f64> {
    let n = features.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            cosine_similarity(&features[i], &features[j])
        }
    })
}

/// Mean over prompts of the Vendi score of that prompt's generations, one
/// per seed. `generate` maps `(condition, seed)` requests to features.
pub fn diversity_eval(
    prompts: &[TextCondition],
    seeds: &[u64],
    mut generate: impl FnMut(&[(TextCondition, u64)]) -> Result<Vec<Vec<f64>>>,
) -> Result<f64> {
    if seeds.len() < 2 {
        return Err(Error::invalid("diversity needs at least two seeds per prompt"));
    }
    if prompts.is_empty() {
        return Err(Error::invalid("diversity needs at least one prompt"));
    }
    let requests: Vec<(TextCondition, u64)> = prompts
        .iter()
        .flat_map(|p| seeds.iter().map(move |&s| (p.clone(), s)))
        .collect();
    let feats = generate(&requests)?;
    if feats.len() != requests.len() {
        return Err(Error::shape("generator returned the wrong number of samples"));
    }
    let scores = feats
        .chunks(seeds.len())
        .map(|group| vendi_score(&cosine_matrix(group)))
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean and standard deviation of per-call wall time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub reps: usize,
    /// Smallest observable clock step.
    pub resolution_ms: f64,
}

impl Timing {
    pub fn below_resolution(&self) -> bool {
        self.mean_ms < self.resolution_ms
    }
}

fn clock_resolution_ms() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min((b - a).as_secs_f64() * 1e3);
    }
    best
}

/// Times `reps` calls of `f` after `warmup` discarded calls.
pub fn throughput_bench(reps: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<Timing> {
    if reps == 0 {
        return Err(Error::invalid("benchmark needs at least one timed repetition"));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        f()?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / reps as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / reps as f64;
    Ok(Timing {
        mean_ms: mean,
        std_ms: var.sqrt(),
        reps,
        resolution_ms: clock_resolution_ms(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Projector output channels; features are these pooled over a 2x2 grid.
    pub channels: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            epochs: 300,
            learning_rate: 0.05,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// Frozen random convolutional projector with standardized, 2x2-pooled
/// outputs, and a softmax-regression class probe trained on them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub projector: Conv2d,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// `classes x features`, row-major.
    pub probe_weight: Vec<f64>,
    pub probe_bias: Vec<f64>,
    pub shape: (usize, usize, usize),
}

fn pooled(projector: &Conv2d, z: &LatentGrid) -> Vec<f64> {
    let (h, w, _) = z.shape();
    let (y, _) = projector.forward(z.as_slice(), Geometry::new(1, h, w));
    let mut y = y;
    relu_inplace(&mut y);
    let p = projector.out_ch;
    let mut out = vec![0.0; 4 * p];
    let mut counts = [0usize; 4];
    for r in 0..h {
        for c in 0..w {
            let q = 2 * usize::from(2 * r >= h) + usize::from(2 * c >= w);
            counts[q] += 1;
            let site = &y[(r * w + c) * p..(r * w + c + 1) * p];
            for (o, v) in out[q * p..(q + 1) * p].iter_mut().zip(site) {
                *o += v;
            }
        }
    }
    for (q, &n) in counts.iter().enumerate() {
        out[q * p..(q + 1) * p].iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    out
}

fn softmax_inplace(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

impl FeatureExtractor {
    /// Draws the projector, fits the feature standardization on `latents`
    /// and trains the probe on `(latents, labels)`.
    pub fn fit(latents: &[LatentGrid], labels: &[usize], num_classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if latents.is_empty() || latents.len() != labels.len() || num_classes == 0 {
            return Err(Error::invalid("probe needs matching, non-empty latents and labels"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside {num_classes} classes")));
        }
        let shape = latents[0].shape();
        if shape.0 < 2 || shape.1 < 2 {
            return Err(Error::shape("feature pooling needs a grid of at least 2x2"));
        }
        if latents.iter().any(|z| z.shape() != shape) {
            return Err(Error::shape("latents differ in shape"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let projector = Conv2d::init(shape.2, cfg.channels, 3, 1.0, &mut rng);
        let raw: Vec<Vec<f64>> = latents.iter().map(|z| pooled(&projector, z)).collect();
        let f = raw[0].len();
        let n = raw.len() as f64;
        let mean: Vec<f64> = (0..f).map(|j| raw.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..f)
            .map(|j| {
                let v = raw.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                v.sqrt().max(1e-8)
            })
            .collect();
        let mut fx = Self {
            projector,
            feature_mean: mean,
            feature_std: std,
            probe_weight: vec![0.0; num_classes * f],
            probe_bias: vec![0.0; num_classes],
            shape,
        };
        let feats: Vec<Vec<f64>> = raw.into_iter().map(|r| fx.standardize(r)).collect();
        fx.train_probe(&feats, labels, cfg, &mut rng);
        Ok(fx)
    }

    fn standardize(&self, mut raw: Vec<f64>) -> Vec<f64> {
        for ((v, m), s) in raw.iter_mut().zip(&self.feature_mean).zip(&self.feature_std) {
            *v = (*v - m) / s;
        }
        raw
    }

    /// Full-batch softmax regression with Adam, examples visited in a
    /// seeded order so the summation order is fixed.
    fn train_probe(&mut self, feats: &[Vec<f64>], labels: &[usize], cfg: &ProbeConfig, rng: &mut ChaCha8Rng) {
        let k = self.num_classes();
        let f = self.feature_dim();
        let mut order: Vec<usize> = (0..feats.len()).collect();
        order.shuffle(rng);
        let lr = LrSchedule {
            peak: cfg.learning_rate,
            warmup: 0,
            total: cfg.epochs,
        };
        let mut opt = AdamW::new(AdamConfig::default(), lr, &[k * f, k]);
        let n = feats.len() as f64;
        for epoch in 0..cfg.epochs {
            let mut gw = vec![0.0; k * f];
            let mut gb = vec![0.0; k];
            for &i in &order {
                let mut p = self.logits_of(&feats[i]);
                softmax_inplace(&mut p);
                p[labels[i]] -= 1.0;
                for (c, &pc) in p.iter().enumerate() {
                    gb[c] += pc / n;
                    for (g, x) in gw[c * f..(c + 1) * f].iter_mut().zip(&feats[i]) {
                        *g += pc * x / n;
                    }
                }
            }
            for (g, w) in gw.iter_mut().zip(&self.probe_weight) {
                *g += cfg.l2 * w;
            }
            let grads = Grads(vec![gw, gb]);
            opt.step(
                vec![&mut self.probe_weight[..], &mut self.probe_bias[..]],
                &grads,
                epoch,
            );
        }
    }

    fn logits_of(&self, feat: &[f64]) -> Vec<f64> {
        let f = self.feature_dim();
        self.probe_bias
            .iter()
            .enumerate()
            .map(|(c, b)| b + self.probe_weight[c * f..(c + 1) * f].iter().zip(feat).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.probe_bias.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_mean.len()
    }

    /// Standardized pooled projector features (the probe's inputs).
    pub fn embed(&self, z: &LatentGrid) -> Result<Vec<f64>> {
        if z.shape() != self.shape {
            return Err(Error::shape(format!(
                "feature extractor expects {:?}, got {:?}",
                self.shape,
                z.shape()
            )));
        }
        Ok(self.standardize(pooled(&self.projector, z)))
    }

    pub fn embed_all(&self, zs: &[LatentGrid]) -> Result<Vec<Vec<f64>>> {
        zs.iter().map(|z| self.embed(z)).collect()
    }

    pub fn predict(&self, z: &LatentGrid) -> Result<usize> {
        let logits = self.logits_of(&self.embed(z)?);
        Ok(logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0)
    }

    /// Fraction of `latents` the probe assigns to their label.
    pub fn accuracy(&self, latents: &[LatentGrid], labels: &[usize]) -> Result<f64> {
        if latents.is_empty() || latents.len() != labels.len() {
            return Err(Error::invalid("accuracy needs matching, non-empty latents and labels"));
        }
        let mut hits = 0;
        for (z, &l) in latents.iter().zip(labels) {
            hits += usize::from(self.predict(z)? == l);
        }
        Ok(hits as f64 / latents.len() as f64)
    }

    pub fn to_container(&self) -> Container {
        let (h, w, d) = self.shape;
        let p = &self.projector;
        let mut c = Container::new(FEATURES_KIND)
            .with_meta("height", h)
            .with_meta("width", w)
            .with_meta("channels", d)
            .with_meta("projector_channels", p.out_ch)
            .with_meta("classes", self.num_classes());
        c.push(NamedTensor::new("projector.weight", vec![p.out_ch, p.k, p.k, p.in_ch], p.weight.clone()));
        c.push(NamedTensor::vector("projector.bias", p.bias.clone()));
        c.push(NamedTensor::vector("feature.mean", self.feature_mean.clone()));
        c.push(NamedTensor::vector("feature.std", self.feature_std.clone()));
        c.push(NamedTensor::new(
            "probe.weight",
            vec![self.num_classes(), self.feature_dim()],
            self.probe_weight.clone(),
        ));
        c.push(NamedTensor::vector("probe.bias", self.probe_bias.clone()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(FEATURES_KIND)?;
        let num = |key: &str| -> Result<usize> {
            c.meta(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::invalid(format!("feature metadata '{key}' missing")))
        };
        let (h, w, d) = (num("height")?, num("width")?, num("channels")?);
        let pc = num("projector_channels")?;
        let k = num("classes")?;
        let f = 4 * pc;
        let mut projector = Conv2d::zeros(d, pc, 3);
        projector.weight = take_tensor(&c.tensors, "projector.weight", projector.weight.len())?;
        projector.bias = take_tensor(&c.tensors, "projector.bias", pc)?;
        Ok(Self {
            projector,
            feature_mean: take_tensor(&c.tensors, "feature.mean", f)?,
            feature_std: take_tensor(&c.tensors, "feature.std", f)?,
            probe_weight: take_tensor(&c.tensors, "probe.weight", k * f)?,
            probe_bias: take_tensor(&c.tensors, "probe.bias", k)?,
            shape: (h, w, d),
        })
    }
}
