//! Per-site latent discriminator with spectrally normalized convolutions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::nn::{relu_backward, relu_inplace, BatchNorm, BatchNormCache, Conv2d, Geometry};
use crate::params::{take_tensor, Grads, NamedTensor, ParamSet};

/// Power-iteration cap per refresh; the persistent vector usually needs few.
const POWER_MAX_ITERS: usize = 200;
const POWER_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            widths: vec![16, 16, 32],
            kernel: 3,
        }
    }
}

fn unit(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// `W^T u` for a row-major `rows x cols` matrix.
fn mat_t_vec(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, x) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += u[r] * x;
        }
    }
    out
}

fn mat_vec(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Top singular value estimate of a row-major `rows x cols` matrix by power
/// iteration warm-started from `u`, which is updated in place. Returns
/// `(sigma, v)` with `sigma = u^T W v`.
pub fn power_iteration(w: &[f64], rows: usize, cols: usize, u: &mut [f64], iters: usize) -> (f64, Vec<f64>) {
    let mut v = vec![0.0; cols];
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        v = mat_t_vec(w, rows, cols, u);
        if unit(&mut v) == 0.0 {
            return (0.0, v);
        }
        let mut wu = mat_vec(w, rows, cols, &v);
        let s = unit(&mut wu);
        u.copy_from_slice(&wu);
        let done = (s - sigma).abs() <= POWER_TOL * s;
        sigma = s;
        if done && iters > 1 {
            break;
        }
    }
    (sigma, v)
}

/// `W / sigma(W)` with `sigma` from `iters` warm-started power iterations.
/// A zero matrix is returned unchanged.
pub fn spectral_normalize(w: &[f64], rows: usize, cols: usize, u: &mut [f64], iters: usize) -> Result<(Vec<f64>, f64)> {
    if w.len() != rows * cols || u.len() != rows {
        return Err(Error::shape("spectral normalization dimensions"));
    }
    let (sigma, _) = power_iteration(w, rows, cols, u, iters);
    if sigma == 0.0 {
        return Ok((w.to_vec(), 0.0));
    }
    Ok((w.iter().map(|x| x / sigma).collect(), sigma))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub config: DiscriminatorConfig,
    pub convs: Vec<Conv2d>,
    pub norms: Vec<BatchNorm>,
    /// Pointwise projection to one logit per site.
    pub head: Conv2d,
    /// Persistent left singular vector estimate per conv.
    pub u: Vec<Vec<f64>>,
    /// Current spectral norm estimate per conv.
    pub sigma: Vec<f64>,
}

/// Training-forward intermediates.
pub struct DiscriminatorCache {
    geometry: Geometry,
    cols: Vec<Vec<f64>>,
    norm: Vec<BatchNormCache>,
    act: Vec<Vec<f64>>,
}

impl DiscriminatorParams {
    pub fn init<R: Rng + ?Sized>(config: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        if config.widths.is_empty() || config.channels == 0 {
            return Err(Error::invalid("discriminator needs at least one layer"));
        }
        let mut convs = Vec::new();
        let mut in_ch = config.channels;
        for &w in &config.widths {
            convs.push(Conv2d::init(in_ch, w, config.kernel, 1.0, rng));
            in_ch = w;
        }
        let head = Conv2d::init(in_ch, 1, 1, 1.0, rng);
        let u = config
            .widths
            .iter()
            .map(|&w| {
                let mut v: Vec<f64> = (0..w).map(|_| rng.gen_range(-1.0..1.0)).collect();
                unit(&mut v);
                v
            })
            .collect();
        let mut p = Self {
            config: config.clone(),
            norms: config.widths.iter().map(|&w| BatchNorm::new(w)).collect(),
            convs,
            head,
            u,
            sigma: vec![1.0; config.widths.len()],
        };
        p.refresh_spectral(POWER_MAX_ITERS);
        Ok(p)
    }

    /// All weights and biases zero; every logit is exactly zero.
    pub fn zeros(config: &DiscriminatorConfig) -> Self {
        let mut in_ch = config.channels;
        let mut convs = Vec::new();
        for &w in &config.widths {
            convs.push(Conv2d::zeros(in_ch, w, config.kernel));
            in_ch = w;
        }
        Self {
            config: config.clone(),
            norms: config.widths.iter().map(|&w| BatchNorm::new(w)).collect(),
            convs,
            head: Conv2d::zeros(in_ch, 1, 1),
            u: config
                .widths
                .iter()
                .map(|&w| {
                    let mut v = vec![0.0; w];
                    v[0] = 1.0;
                    v
                })
                .collect(),
            sigma: vec![0.0; config.widths.len()],
        }
    }

    /// Re-estimates every layer's spectral norm from its persistent vector.
    pub fn refresh_spectral(&mut self, iters: usize) {
        for (l, c) in self.convs.iter().enumerate() {
            let (s, _) = power_iteration(&c.weight, c.out_ch, c.patch_len(), &mut self.u[l], iters);
            self.sigma[l] = s;
        }
    }

    /// Refresh until converged (bounded).
    pub fn refresh_spectral_converged(&mut self) {
        self.refresh_spectral(POWER_MAX_ITERS);
    }

    /// The normalized weight actually used by layer `l`.
    pub fn normalized_weight(&self, l: usize) -> Vec<f64> {
        let s = self.sigma[l];
        if s == 0.0 {
            return self.convs[l].weight.clone();
        }
        self.convs[l].weight.iter().map(|w| w / s).collect()
    }

    fn check(&self, x: &[f64], g: Geometry) -> Result<()> {
        if g.batch == 0 || x.len() != g.rows() * self.config.channels {
            return Err(Error::shape("discriminator input size"));
        }
        Ok(())
    }

    /// Batch-statistics forward over `g.batch` stacked grids; returns one
    /// logit per site. Running statistics are not touched.
    pub fn forward_train(&self, x: &[f64], g: Geometry) -> Result<(Vec<f64>, DiscriminatorCache)> {
        self.check(x, g)?;
        let mut h = x.to_vec();
        let mut cols = Vec::new();
        let mut norm = Vec::new();
        let mut act = Vec::new();
        for (l, conv) in self.convs.iter().enumerate() {
            let c = crate::nn::im2col(&h, g, conv.in_ch, conv.k);
            let pre = conv.forward_cols_with(&c, g, &self.normalized_weight(l));
            let (mut y, nc) = self.norms[l].forward_train(&pre);
            relu_inplace(&mut y);
            cols.push(c);
            norm.push(nc);
            act.push(y.clone());
            h = y;
        }
        let logits = self.head.forward_cols(&h, g);
        Ok((
            logits,
            DiscriminatorCache {
                geometry: g,
                cols,
                norm,
                act,
            },
        ))
    }

    /// Running-statistics forward for a single grid.
    pub fn forward(&self, y: &LatentGrid) -> Result<Vec<f64>> {
        let g = Geometry::new(1, y.height(), y.width());
        self.check(y.as_slice(), g)?;
        let mut h = y.as_slice().to_vec();
        for (l, conv) in self.convs.iter().enumerate() {
            let c = crate::nn::im2col(&h, g, conv.in_ch, conv.k);
            let pre = conv.forward_cols_with(&c, g, &self.normalized_weight(l));
            h = self.norms[l].forward_infer(&pre);
            relu_inplace(&mut h);
        }
        Ok(self.head.forward_cols(&h, g))
    }

    pub fn commit(&mut self, cache: &DiscriminatorCache) {
        for (n, c) in self.norms.iter_mut().zip(&cache.norm) {
            n.commit(c);
        }
    }

    /// Reverse pass for per-site logit gradients. Spectral normalization is
    /// differentiated with the singular vectors held fixed. Returns
    /// parameter gradients and, when requested, the input gradient.
    pub fn backward(&self, cache: &DiscriminatorCache, g_logits: &[f64], need_input: bool) -> (Grads, Option<Vec<f64>>) {
        let g = cache.geometry;
        let mut grads = self.zero_grads();
        let nl = self.convs.len();
        let hb = 4 * nl;
        let (mut gw, mut gb) = (std::mem::take(&mut grads.0[hb]), std::mem::take(&mut grads.0[hb + 1]));
        let mut gy = self
            .head
            .backward(&cache.act[nl - 1], g_logits, g, &mut gw, &mut gb, true)
            .expect("input gradient requested");
        grads.0[hb] = gw;
        grads.0[hb + 1] = gb;
        for l in (0..nl).rev() {
            relu_backward(&cache.act[l], &mut gy);
            let (mut gg, mut gbeta) = (std::mem::take(&mut grads.0[4 * l + 2]), std::mem::take(&mut grads.0[4 * l + 3]));
            let gpre = self.norms[l].backward(&cache.norm[l], &gy, &mut gg, &mut gbeta);
            grads.0[4 * l + 2] = gg;
            grads.0[4 * l + 3] = gbeta;
            let conv = &self.convs[l];
            let wn = self.normalized_weight(l);
            let mut g_wn = vec![0.0; wn.len()];
            let mut gbias = std::mem::take(&mut grads.0[4 * l + 1]);
            let gx = conv.backward_with(&wn, &cache.cols[l], &gpre, g, &mut g_wn, &mut gbias, l > 0 || need_input);
            grads.0[4 * l + 1] = gbias;
            grads.0[4 * l] = self.spectral_weight_grad(l, &g_wn);
            match gx {
                Some(gx) => gy = gx,
                None => return (grads, None),
            }
        }
        (grads, Some(gy))
    }

    /// `dL/dW` from `dL/dW_sn` for `W_sn = W / (u^T W v)`.
    fn spectral_weight_grad(&self, l: usize, g_wn: &[f64]) -> Vec<f64> {
        let s = self.sigma[l];
        if s == 0.0 {
            return g_wn.to_vec();
        }
        let c = &self.convs[l];
        let (rows, cols) = (c.out_ch, c.patch_len());
        let u = &self.u[l];
        let mut v = mat_t_vec(&c.weight, rows, cols, u);
        unit(&mut v);
        let inner: f64 = g_wn.iter().zip(&c.weight).map(|(a, b)| a * b).sum::<f64>() / (s * s);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for k in 0..cols {
                out[r * cols + k] = g_wn[r * cols + k] / s - inner * u[r] * v[k];
            }
        }
        out
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (l, (c, n)) in self.convs.iter().zip(&self.norms).enumerate() {
            out.push(NamedTensor::new(format!("conv{l}.weight"), vec![c.out_ch, c.k, c.k, c.in_ch], c.weight.clone()));
            out.push(NamedTensor::vector(format!("conv{l}.bias"), c.bias.clone()));
            out.push(NamedTensor::vector(format!("norm{l}.gamma"), n.gamma.clone()));
            out.push(NamedTensor::vector(format!("norm{l}.beta"), n.beta.clone()));
            out.push(NamedTensor::vector(format!("norm{l}.running_mean"), n.running_mean.clone()));
            out.push(NamedTensor::vector(format!("norm{l}.running_var"), n.running_var.clone()));
            out.push(NamedTensor::vector(format!("sn{l}.u"), self.u[l].clone()));
        }
        out.push(NamedTensor::vector("sn.sigma", self.sigma.clone()));
        out.push(NamedTensor::new("head.weight", vec![1, self.head.in_ch], self.head.weight.clone()));
        out.push(NamedTensor::vector("head.bias", self.head.bias.clone()));
        out
    }

    pub fn from_tensors(config: &DiscriminatorConfig, tensors: &[NamedTensor]) -> Result<Self> {
        let mut p = Self::zeros(config);
        for l in 0..config.widths.len() {
            let c = &mut p.convs[l];
            c.weight = take_tensor(tensors, &format!("conv{l}.weight"), c.weight.len())?;
            c.bias = take_tensor(tensors, &format!("conv{l}.bias"), c.bias.len())?;
            let n = &mut p.norms[l];
            let w = n.channels();
            n.gamma = take_tensor(tensors, &format!("norm{l}.gamma"), w)?;
            n.beta = take_tensor(tensors, &format!("norm{l}.beta"), w)?;
            n.running_mean = take_tensor(tensors, &format!("norm{l}.running_mean"), w)?;
            n.running_var = take_tensor(tensors, &format!("norm{l}.running_var"), w)?;
            p.u[l] = take_tensor(tensors, &format!("sn{l}.u"), w)?;
        }
        p.sigma = take_tensor(tensors, "sn.sigma", config.widths.len())?;
        p.head.weight = take_tensor(tensors, "head.weight", p.head.weight.len())?;
        p.head.bias = take_tensor(tensors, "head.bias", 1)?;
        Ok(p)
    }
}

impl ParamSet for DiscriminatorParams {
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.convs.len() {
            names.push(format!("conv{l}.weight"));
            names.push(format!("conv{l}.bias"));
            names.push(format!("norm{l}.gamma"));
            names.push(format!("norm{l}.beta"));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (c, n) in self.convs.iter().zip(&self.norms) {
            out.push(&c.weight);
            out.push(&c.bias);
            out.push(&n.gamma);
            out.push(&n.beta);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (c, n) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DiscriminatorConfig {
        DiscriminatorConfig {
            channels: 2,
            widths: vec![3, 2],
            kernel: 3,
        }
    }

    #[test]
    fn zero_discriminator_gives_zero_logits() {
        let d = DiscriminatorParams::zeros(&DiscriminatorConfig::default());
        let y = LatentGrid::randn(4, 4, 4, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(d.forward(&y).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn power_iteration_finds_diagonal_norm() {
        let w = [3.0, 0.0, 0.0, 1.0];
        let mut u = vec![0.6, 0.8];
        let (wn, s) = spectral_normalize(&w, 2, 2, &mut u, 100).unwrap();
        assert!((s - 3.0).abs() < 1e-12);
        assert!((wn[0] - 1.0).abs() < 1e-12 && (wn[3] - 1.0 / 3.0).abs() < 1e-12);
        let mut u0 = vec![1.0, 0.0];
        assert_eq!(spectral_normalize(&[0.0; 4], 2, 2, &mut u0, 5).unwrap().1, 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = DiscriminatorParams::init(&tiny(), &mut rng).unwrap();
        let g = Geometry::new(2, 3, 3);
        let x: Vec<f64> = (0..g.rows() * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..g.rows()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // The loss sees sigma as the function u^T W v with u, v frozen.
        let loss = |p: &DiscriminatorParams, x: &[f64]| -> f64 {
            let mut q = p.clone();
            for l in 0..q.convs.len() {
                let c = &q.convs[l];
                let mut v = mat_t_vec(&p.convs[l].weight, c.out_ch, c.patch_len(), &p.u[l]);
                unit(&mut v);
                let wv = mat_vec(&c.weight, c.out_ch, c.patch_len(), &v);
                q.sigma[l] = p.u[l].iter().zip(&wv).map(|(a, b)| a * b).sum();
            }
            let (o, _) = q.forward_train(x, g).unwrap();
            o.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = d.forward_train(&x, g).unwrap();
        let (grads, gx) = d.backward(&cache, &r, true);
        let h = 1e-6;
        for bi in 0..d.params().len() {
            for i in 0..d.params()[bi].len() {
                let mut q = d.clone();
                q.params_mut()[bi][i] += h;
                let fp = loss(&q, &x);
                q.params_mut()[bi][i] -= 2.0 * h;
                let fm = loss(&q, &x);
                let num = (fp - fm) / (2.0 * h);
                assert!((num - grads.0[bi][i]).abs() < 1e-5, "block {bi}[{i}]: {num} vs {}", grads.0[bi][i]);
            }
        }
        let gx = gx.unwrap();
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let fp = loss(&d, &xp);
            xp[i] -= 2.0 * h;
            let fm = loss(&d, &xp);
            assert!(((fp - fm) / (2.0 * h) - gx[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn tensor_roundtrip_keeps_state() {
        let d = DiscriminatorParams::init(&tiny(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(DiscriminatorParams::from_tensors(&tiny(), &d.to_tensors()).unwrap(), d);
    }
}
