//! Dense building blocks for the surrogate denoiser, the discriminator and
//! the feature projector: same-padded 2D convolution (im2col + GEMM), batch
//! normalization and ReLU, each with a hand-written backward pass.
//!
//! Activations use the grid layout: a batch of `B` images of `H x W` sites
//! is a row-major `(B * H * W) x C` matrix.

use matrixmultiply::dgemm;
use rand::Rng;
use rand_distr::StandardNormal;

/// Spatial extent shared by a batch of activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn new(batch: usize, height: usize, width: usize) -> Self {
        Self { batch, height, width }
    }

    pub fn sites(&self) -> usize {
        self.height * self.width
    }

    pub fn rows(&self) -> usize {
        self.batch * self.sites()
    }
}

/// `C[m x n] = alpha * A[m x k] * B[k x n] + beta * C`, all row-major;
/// `trans_a` / `trans_b` read the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe matrices that lie within the
    // provided slices, whose lengths are checked in debug builds.
    unsafe {
        dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same-padded square convolution with `weight` stored as
/// `out x (k * k * in)` (patch order: row, column, input channel).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "convolution size must be odd");
        Self {
            in_ch,
            out_ch,
            k,
            weight: vec![0.0; out_ch * k * k * in_ch],
            bias: vec![0.0; out_ch],
        }
    }

    /// He-normal initialization scaled by `gain`.
    pub fn init<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, k: usize, gain: f64, rng: &mut R) -> Self {
        let mut c = Self::zeros(in_ch, out_ch, k);
        let std = gain * (2.0 / (k * k * in_ch) as f64).sqrt();
        for w in c.weight.iter_mut() {
            *w = std * rng.sample::<f64, _>(StandardNormal);
        }
        c
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.in_ch
    }

    pub fn flops_per_site(&self) -> usize {
        2 * self.patch_len() * self.out_ch
    }

    /// `y = conv(x; weight) + bias`. Returns the output and the im2col
    /// buffer needed for the backward pass.
    pub fn forward(&self, x: &[f64], g: Geometry) -> (Vec<f64>, Vec<f64>) {
        let cols = im2col(x, g, self.in_ch, self.k);
        let y = self.forward_cols(&cols, g);
        (y, cols)
    }

    /// Forward from a prepared im2col buffer, with an explicit weight
    /// (used by spectrally normalized layers).
    pub fn forward_cols_with(&self, cols: &[f64], g: Geometry, weight: &[f64]) -> Vec<f64> {
        let rows = g.rows();
        let mut y = Vec::with_capacity(rows * self.out_ch);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias);
        }
        gemm(rows, self.patch_len(), self.out_ch, 1.0, cols, false, weight, true, 1.0, &mut y);
        y
    }

    pub fn forward_cols(&self, cols: &[f64], g: Geometry) -> Vec<f64> {
        self.forward_cols_with(cols, g, &self.weight)
    }

    /// Accumulates weight and bias gradients; returns the input gradient
    /// when `need_input` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_with(
        &self,
        weight: &[f64],
        cols: &[f64],
        gy: &[f64],
        g: Geometry,
        gw: &mut [f64],
        gb: &mut [f64],
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let rows = g.rows();
        let p = self.patch_len();
        // gW[out x p] += gy^T[out x rows] * cols[rows x p]
        gemm(self.out_ch, rows, p, 1.0, gy, true, cols, false, 1.0, gw);
        for row in gy.chunks_exact(self.out_ch) {
            for (b, v) in gb.iter_mut().zip(row) {
                *b += v;
            }
        }
        if !need_input {
            return None;
        }
        let mut gcols = vec![0.0; rows * p];
        gemm(rows, self.out_ch, p, 1.0, gy, false, weight, false, 0.0, &mut gcols);
        Some(col2im(&gcols, g, self.in_ch, self.k))
    }

    pub fn backward(
        &self,
        cols: &[f64],
        gy: &[f64],
        g: Geometry,
        gw: &mut [f64],
        gb: &mut [f64],
        need_input: bool,
    ) -> Option<Vec<f64>> {
        self.backward_with(&self.weight, cols, gy, g, gw, gb, need_input)
    }
}

/// Zero-padded patch extraction: `(rows) x (k * k * ch)`.
pub fn im2col(x: &[f64], g: Geometry, ch: usize, k: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), g.rows() * ch);
    let (h, w) = (g.height as isize, g.width as isize);
    let r = (k / 2) as isize;
    let p = k * k * ch;
    let mut cols = vec![0.0; g.rows() * p];
    for b in 0..g.batch {
        let img = &x[b * g.sites() * ch..(b + 1) * g.sites() * ch];
        for row in 0..h {
            for col in 0..w {
                let out_row = b * g.sites() + (row * w + col) as usize;
                let dst = &mut cols[out_row * p..(out_row + 1) * p];
                for a in 0..k as isize {
                    let rr = row + a - r;
                    if rr < 0 || rr >= h {
                        continue;
                    }
                    for bb in 0..k as isize {
                        let cc = col + bb - r;
                        if cc < 0 || cc >= w {
                            continue;
                        }
                        let src = ((rr * w + cc) as usize) * ch;
                        let off = ((a as usize) * k + bb as usize) * ch;
                        dst[off..off + ch].copy_from_slice(&img[src..src + ch]);
                    }
                }
            }
        }
    }
    cols
}

/// Transpose of [`im2col`]: scatters patch gradients back onto sites.
pub fn col2im(cols: &[f64], g: Geometry, ch: usize, k: usize) -> Vec<f64> {
    let (h, w) = (g.height as isize, g.width as isize);
    let r = (k / 2) as isize;
    let p = k * k * ch;
    let mut x = vec![0.0; g.rows() * ch];
    for b in 0..g.batch {
        let img = &mut x[b * g.sites() * ch..(b + 1) * g.sites() * ch];
        for row in 0..h {
            for col in 0..w {
                let in_row = b * g.sites() + (row * w + col) as usize;
                let src = &cols[in_row * p..(in_row + 1) * p];
                for a in 0..k as isize {
                    let rr = row + a - r;
                    if rr < 0 || rr >= h {
                        continue;
                    }
                    for bb in 0..k as isize {
                        let cc = col + bb - r;
                        if cc < 0 || cc >= w {
                            continue;
                        }
                        let dst = ((rr * w + cc) as usize) * ch;
                        let off = ((a as usize) * k + bb as usize) * ch;
                        for c in 0..ch {
                            img[dst + c] += src[off + c];
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = v.max(0.0);
    }
}

/// Zeroes `g` wherever the forward activation was clamped.
pub fn relu_backward(activated: &[f64], g: &mut [f64]) {
    for (gv, a) in g.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *gv = 0.0;
        }
    }
}

/// Per-channel batch normalization over all rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

/// Batch statistics and standardized activations from a training forward.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub normalized: Vec<f64>,
    pub rows: usize,
}

impl BatchNorm {
    pub fn new(ch: usize) -> Self {
        Self {
            gamma: vec![1.0; ch],
            beta: vec![0.0; ch],
            running_mean: vec![0.0; ch],
            running_var: vec![1.0; ch],
            momentum: 0.99,
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Training forward with batch statistics. Running statistics are left
    /// untouched; call [`BatchNorm::commit`] to fold the cache in.
    pub fn forward_train(&self, x: &[f64]) -> (Vec<f64>, BatchNormCache) {
        let ch = self.channels();
        let rows = x.len() / ch;
        let n = rows as f64;
        let mut mean = vec![0.0; ch];
        for row in x.chunks_exact(ch) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; ch];
        for row in x.chunks_exact(ch) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let mut normalized = x.to_vec();
        let mut y = x.to_vec();
        for (nr, yr) in normalized.chunks_exact_mut(ch).zip(y.chunks_exact_mut(ch)) {
            for c in 0..ch {
                nr[c] = (nr[c] - mean[c]) * inv_std[c];
                yr[c] = self.gamma[c] * nr[c] + self.beta[c];
            }
        }
        (
            y,
            BatchNormCache {
                mean,
                var,
                inv_std,
                normalized,
                rows,
            },
        )
    }

    /// Folds a training batch's statistics into the running estimates.
    pub fn commit(&mut self, cache: &BatchNormCache) {
        let n = cache.rows as f64;
        let unbias = if cache.rows > 1 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.channels() {
            self.running_mean[c] = self.momentum * self.running_mean[c] + (1.0 - self.momentum) * cache.mean[c];
            self.running_var[c] = self.momentum * self.running_var[c] + (1.0 - self.momentum) * cache.var[c] * unbias;
        }
    }

    pub fn forward_infer(&self, x: &[f64]) -> Vec<f64> {
        let ch = self.channels();
        let scale: Vec<f64> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / (v + self.epsilon).sqrt())
            .collect();
        let mut y = x.to_vec();
        for row in y.chunks_exact_mut(ch) {
            for c in 0..ch {
                row[c] = (row[c] - self.running_mean[c]) * scale[c] + self.beta[c];
            }
        }
        y
    }

    /// Full batch-statistics backward. Accumulates `gamma`/`beta` gradients
    /// and returns the input gradient.
    pub fn backward(&self, cache: &BatchNormCache, gy: &[f64], g_gamma: &mut [f64], g_beta: &mut [f64]) -> Vec<f64> {
        let ch = self.channels();
        let n = cache.rows as f64;
        let mut sum_g = vec![0.0; ch];
        let mut sum_gn = vec![0.0; ch];
        for (gr, nr) in gy.chunks_exact(ch).zip(cache.normalized.chunks_exact(ch)) {
            for c in 0..ch {
                sum_g[c] += gr[c];
                sum_gn[c] += gr[c] * nr[c];
            }
        }
        for c in 0..ch {
            g_gamma[c] += sum_gn[c];
            g_beta[c] += sum_g[c];
        }
        let mut gx = gy.to_vec();
        for (gr, nr) in gx.chunks_exact_mut(ch).zip(cache.normalized.chunks_exact(ch)) {
            for c in 0..ch {
                let m1 = self.gamma[c] * sum_g[c] / n;
                let m2 = self.gamma[c] * sum_gn[c] / n;
                gr[c] = cache.inv_std[c] * (self.gamma[c] * gr[c] - m1 - nr[c] * m2);
            }
        }
        gx
    }
}
