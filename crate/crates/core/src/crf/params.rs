//! Learnable CRF quantities.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TextCondition;
use crate::params::{take_tensor, NamedTensor, ParamSet};

/// Stationary pairwise affinity: `W^s_ij = weight(pos_j - pos_i)`.
///
/// The kernel is stored by its free half (the entries preceding the center in
/// row-major order). The other half is the 180° rotation, and the center is
/// fixed at zero, so the induced pairwise weights are symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialKernel {
    size: usize,
    half: Vec<f64>,
}

impl SpatialKernel {
    pub fn zeros(size: usize) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size must be odd and positive, got {size}")));
        }
        Ok(Self {
            size,
            half: vec![0.0; (size * size - 1) / 2],
        })
    }

    pub fn from_half(size: usize, half: Vec<f64>) -> Result<Self> {
        let mut k = Self::zeros(size)?;
        if half.len() != k.half.len() {
            return Err(Error::shape(format!(
                "kernel of size {size} has {} free weights, got {}",
                k.half.len(),
                half.len()
            )));
        }
        k.half = half;
        Ok(k)
    }

    /// Every off-center tap set to `w`.
    pub fn uniform(size: usize, w: f64) -> Result<Self> {
        let mut k = Self::zeros(size)?;
        k.half.iter_mut().for_each(|v| *v = w);
        Ok(k)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn half(&self) -> &[f64] {
        &self.half
    }

    pub fn half_mut(&mut self) -> &mut [f64] {
        &mut self.half
    }

    /// Weight for a neighbor at offset `(dr, dc)`; zero outside the window.
    pub fn weight(&self, dr: isize, dc: isize) -> f64 {
        let r = self.radius() as isize;
        if dr.abs() > r || dc.abs() > r {
            return 0.0;
        }
        let idx = ((dr + r) * self.size as isize + (dc + r)) as usize;
        self.weight_at_index(idx)
    }

    fn weight_at_index(&self, idx: usize) -> f64 {
        let center = (self.size * self.size) / 2;
        match idx.cmp(&center) {
            std::cmp::Ordering::Less => self.half[idx],
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Greater => self.half[self.size * self.size - 1 - idx],
        }
    }

    /// The full `size x size` weight table in row-major order.
    pub fn full(&self) -> Vec<f64> {
        (0..self.size * self.size).map(|i| self.weight_at_index(i)).collect()
    }

    /// All window offsets with their weights, row-major, center excluded.
    pub fn taps(&self) -> Vec<(isize, isize, f64)> {
        let r = self.radius() as isize;
        let mut out = Vec::with_capacity(self.size * self.size - 1);
        for dr in -r..=r {
            for dc in -r..=r {
                if dr == 0 && dc == 0 {
                    continue;
                }
                out.push((dr, dc, self.weight(dr, dc)));
            }
        }
        out
    }

    /// Map a gradient over the full table onto the free half.
    pub fn fold_gradient(&self, full_grad: &[f64]) -> Vec<f64> {
        let n = self.size * self.size;
        (0..self.half.len())
            .map(|i| full_grad[i] + full_grad[n - 1 - i])
            .collect()
    }
}

/// Bank of `count` filters of shape `height x width x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    bound: f64,
    coeffs: Vec<f64>,
}

impl FilterBank {
    pub fn zeros(count: usize, height: usize, width: usize, channels: usize, bound: f64) -> Result<Self> {
        if height.is_multiple_of(2) || width.is_multiple_of(2) || height == 0 || width == 0 {
            return Err(Error::invalid("filter sizes must be odd and positive"));
        }
        if channels == 0 {
            return Err(Error::invalid("filter channels must be positive"));
        }
        if !(bound > 0.0) {
            return Err(Error::invalid("filter bound must be positive"));
        }
        Ok(Self {
            count,
            height,
            width,
            channels,
            bound,
            coeffs: vec![0.0; count * height * width * channels],
        })
    }

    pub fn from_coeffs(
        count: usize,
        height: usize,
        width: usize,
        channels: usize,
        bound: f64,
        coeffs: Vec<f64>,
    ) -> Result<Self> {
        let mut f = Self::zeros(count, height, width, channels, bound)?;
        if coeffs.len() != f.coeffs.len() {
            return Err(Error::shape("filter coefficient count"));
        }
        f.coeffs = coeffs;
        f.enforce_constraints();
        Ok(f)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    #[inline]
    pub fn index(&self, m: usize, a: usize, b: usize, ch: usize) -> usize {
        ((m * self.height + a) * self.width + b) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, m: usize, a: usize, b: usize, ch: usize) -> f64 {
        self.coeffs[self.index(m, a, b, ch)]
    }

    pub fn is_center(&self, flat: usize) -> bool {
        let per_filter = self.height * self.width * self.channels;
        let within = flat % per_filter;
        let spatial = within / self.channels;
        spatial == (self.height / 2) * self.width + self.width / 2
    }

    /// Zero every filter's center latent and clip to the max-norm bound.
    pub fn enforce_constraints(&mut self) {
        let (ca, cb) = (self.height / 2, self.width / 2);
        for m in 0..self.count {
            for ch in 0..self.channels {
                let i = self.index(m, ca, cb, ch);
                self.coeffs[i] = 0.0;
            }
        }
        let b = self.bound;
        for v in self.coeffs.iter_mut() {
            *v = v.clamp(-b, b);
        }
    }

    pub fn satisfies_constraints(&self) -> bool {
        self.coeffs.iter().enumerate().all(|(i, v)| {
            v.is_finite() && v.abs() <= self.bound && (!self.is_center(i) || *v == 0.0)
        })
    }
}

/// Two per-site affine maps with a ReLU between them; the first layer's
/// scale and shift are generated from the condition embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityNet {
    pub dim: usize,
    pub hidden: usize,
    pub cond_dim: usize,
    /// `hidden x dim`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `hidden x cond_dim`
    pub scale_gen: Vec<f64>,
    pub scale_bias: Vec<f64>,
    /// `hidden x cond_dim`
    pub shift_gen: Vec<f64>,
    pub shift_bias: Vec<f64>,
    /// `dim x hidden`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Per-sample FiLM coefficients produced from a condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Film {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl CompatibilityNet {
    pub fn zeros(dim: usize, hidden: usize, cond_dim: usize) -> Self {
        assert!(hidden <= 64, "compatibility hidden width is capped at 64");
        Self {
            dim,
            hidden,
            cond_dim,
            w1: vec![0.0; hidden * dim],
            b1: vec![0.0; hidden],
            scale_gen: vec![0.0; hidden * cond_dim],
            scale_bias: vec![0.0; hidden],
            shift_gen: vec![0.0; hidden * cond_dim],
            shift_bias: vec![0.0; hidden],
            w2: vec![0.0; dim * hidden],
            b2: vec![0.0; dim],
        }
    }

    pub fn film(&self, c: &TextCondition) -> Result<Film> {
        if c.dim() != self.cond_dim {
            return Err(Error::shape(format!(
                "condition dim {} vs compatibility net {}",
                c.dim(),
                self.cond_dim
            )));
        }
        let e = &c.embedding;
        let mut scale = vec![0.0; self.hidden];
        let mut shift = vec![0.0; self.hidden];
        for h in 0..self.hidden {
            let row = h * self.cond_dim;
            let mut s = self.scale_bias[h];
            let mut t = self.shift_bias[h];
            for k in 0..self.cond_dim {
                s += self.scale_gen[row + k] * e[k];
                t += self.shift_gen[row + k] * e[k];
            }
            scale[h] = 1.0 + s;
            shift[h] = t;
        }
        Ok(Film { scale, shift })
    }

    /// Apply to one site. `pre` receives the pre-activation hidden values
    /// (after FiLM) and `lin` the pre-FiLM affine output when provided.
    #[inline]
    pub fn forward_site(
        &self,
        input: &[f64],
        film: &Film,
        out: &mut [f64],
        mut lin: Option<&mut [f64]>,
        mut pre: Option<&mut [f64]>,
    ) {
        let mut act = [0.0f64; 64];
        let act = &mut act[..self.hidden];
        for h in 0..self.hidden {
            let row = &self.w1[h * self.dim..(h + 1) * self.dim];
            let mut v = self.b1[h];
            for (w, x) in row.iter().zip(input) {
                v += w * x;
            }
            if let Some(l) = lin.as_deref_mut() {
                l[h] = v;
            }
            let z = v * film.scale[h] + film.shift[h];
            if let Some(p) = pre.as_deref_mut() {
                p[h] = z;
            }
            act[h] = z.max(0.0);
        }
        for d in 0..self.dim {
            let row = &self.w2[d * self.hidden..(d + 1) * self.hidden];
            let mut v = self.b2[d];
            for (w, a) in row.iter().zip(act.iter()) {
                v += w * a;
            }
            out[d] = v;
        }
    }
}

/// The linear compatibility matrix `W(c) = base + sum_k c_k gen_k` used by
/// the energy function and the coordinate-descent oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatMatrix {
    pub dim: usize,
    pub cond_dim: usize,
    /// `dim x dim`
    pub base: Vec<f64>,
    /// `cond_dim x dim x dim`
    pub gen: Vec<f64>,
}

impl CompatMatrix {
    pub fn identity(dim: usize, cond_dim: usize) -> Self {
        let mut base = vec![0.0; dim * dim];
        for i in 0..dim {
            base[i * dim + i] = 1.0;
        }
        Self {
            dim,
            cond_dim,
            base,
            gen: vec![0.0; cond_dim * dim * dim],
        }
    }

    /// `W(c)` as a row-major `dim x dim` matrix.
    pub fn matrix(&self, c: &TextCondition) -> Result<Vec<f64>> {
        if c.dim() != self.cond_dim {
            return Err(Error::shape("condition dim vs compatibility matrix"));
        }
        let n = self.dim * self.dim;
        let mut w = self.base.clone();
        for (k, ck) in c.embedding.iter().enumerate() {
            for (wi, gi) in w.iter_mut().zip(&self.gen[k * n..(k + 1) * n]) {
                *wi += ck * gi;
            }
        }
        Ok(w)
    }

    /// `W(c)^T W(c)`, row-major.
    pub fn gram(&self, c: &TextCondition) -> Result<Vec<f64>> {
        let w = self.matrix(c)?;
        let d = self.dim;
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += w[k * d + i] * w[k * d + j];
                }
                a[i * d + j] = s;
            }
        }
        Ok(a)
    }
}

/// Per-channel batch normalization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizerParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    /// When false, training mode also uses the running statistics.
    pub track_batch_stats: bool,
}

impl NormalizerParams {
    pub fn new(dim: usize, momentum: f64, epsilon: f64) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum,
            epsilon,
            track_batch_stats: true,
        }
    }

    /// Exact identity in both modes: frozen statistics with
    /// `gamma = sqrt(1 + eps)` so the affine map is `x -> x` bit for bit.
    pub fn identity(dim: usize, epsilon: f64) -> Self {
        let g = (1.0 + epsilon).sqrt();
        Self {
            gamma: vec![g; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.99,
            epsilon,
            track_batch_stats: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Inference-mode per-channel `(scale, shift)` so that `y = x * scale + shift`.
    pub fn inference_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / (v + self.epsilon).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.running_mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfConfig {
    pub channels: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub kernel_size: usize,
    pub num_filters: usize,
    pub filter_size: usize,
    pub filter_bound: f64,
    pub num_iterations: usize,
    pub eps_phi: f64,
    pub momentum: f64,
    pub norm_epsilon: f64,
    pub kernel_init: f64,
    pub filter_init: f64,
    pub compat_init: f64,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            cond_dim: 8,
            hidden: 8,
            kernel_size: 5,
            num_filters: 8,
            filter_size: 3,
            filter_bound: 3.0,
            num_iterations: 5,
            eps_phi: 1e-6,
            momentum: 0.99,
            norm_epsilon: 1e-5,
            kernel_init: 0.01,
            filter_init: 0.05,
            compat_init: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    pub kernel: SpatialKernel,
    pub compat: CompatibilityNet,
    pub compat_matrix: CompatMatrix,
    pub filters: FilterBank,
    pub normalizer: NormalizerParams,
    pub num_iterations: usize,
    pub eps_phi: f64,
}

impl CrfParams {
    /// Seeded random initialization.
    pub fn init<R: Rng + ?Sized>(cfg: &CrfConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.channels;
        let mut normal = |s: f64| -> f64 { s * rng.sample::<f64, _>(StandardNormal) };

        let mut kernel = SpatialKernel::zeros(cfg.kernel_size)?;
        for v in kernel.half_mut() {
            *v = cfg.kernel_init * (1.0 + 0.5 * normal(1.0)).abs();
        }

        let mut compat = CompatibilityNet::zeros(d, cfg.hidden, cfg.cond_dim);
        let s1 = cfg.compat_init / (d as f64).sqrt();
        let sc = cfg.compat_init / (cfg.cond_dim.max(1) as f64).sqrt();
        let s2 = cfg.compat_init / (cfg.hidden as f64).sqrt();
        compat.w1.iter_mut().for_each(|v| *v = normal(s1));
        compat.scale_gen.iter_mut().for_each(|v| *v = normal(sc));
        compat.shift_gen.iter_mut().for_each(|v| *v = normal(sc));
        compat.w2.iter_mut().for_each(|v| *v = normal(s2));

        let mut compat_matrix = CompatMatrix::identity(d, cfg.cond_dim);
        compat_matrix.gen.iter_mut().for_each(|v| *v = normal(0.1));

        let mut filters = FilterBank::zeros(
            cfg.num_filters,
            cfg.filter_size,
            cfg.filter_size,
            d,
            cfg.filter_bound,
        )?;
        filters.coeffs_mut().iter_mut().for_each(|v| *v = normal(cfg.filter_init));
        filters.enforce_constraints();

        Ok(Self {
            kernel,
            compat,
            compat_matrix,
            filters,
            normalizer: NormalizerParams::new(d, cfg.momentum, cfg.norm_epsilon),
            num_iterations: cfg.num_iterations,
            eps_phi: cfg.eps_phi,
        })
    }

    /// Parameters for which inference returns its input unchanged: zero
    /// compatibility net, zero filters and an exact-identity normalizer.
    pub fn identity(cfg: &CrfConfig) -> Result<Self> {
        let d = cfg.channels;
        Ok(Self {
            kernel: SpatialKernel::zeros(cfg.kernel_size)?,
            compat: CompatibilityNet::zeros(d, cfg.hidden, cfg.cond_dim),
            compat_matrix: CompatMatrix::identity(d, cfg.cond_dim),
            filters: FilterBank::zeros(cfg.num_filters, cfg.filter_size, cfg.filter_size, d, cfg.filter_bound)?,
            normalizer: NormalizerParams::identity(d, cfg.norm_epsilon),
            num_iterations: cfg.num_iterations,
            eps_phi: cfg.eps_phi,
        })
    }

    pub fn channels(&self) -> usize {
        self.compat.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.compat.cond_dim
    }

    /// Total learnable quantities, including the energy-side matrix generator.
    pub fn total_parameter_count(&self) -> usize {
        self.param_count() + self.compat_matrix.base.len() + self.compat_matrix.gen.len()
    }

    /// Arithmetic operations of one `crf_infer` call on an `h x w` grid,
    /// counting a multiply-add as two.
    pub fn flops_per_call(&self, height: usize, width: usize) -> usize {
        let d = self.channels();
        let hid = self.compat.hidden;
        let k = self.kernel.size();
        let filt = self.filters.count() * self.filters.height() * self.filters.width() * d;
        let per_site = 2 * k * k * d + 4 * hid * d + 3 * hid + 4 * filt + self.filters.count() + 4 * d;
        4 * hid * self.cond_dim() + self.num_iterations * height * width * per_site
    }

    pub fn config(&self) -> CrfConfig {
        CrfConfig {
            channels: self.channels(),
            cond_dim: self.cond_dim(),
            hidden: self.compat.hidden,
            kernel_size: self.kernel.size(),
            num_filters: self.filters.count(),
            filter_size: self.filters.height(),
            filter_bound: self.filters.bound(),
            num_iterations: self.num_iterations,
            eps_phi: self.eps_phi,
            momentum: self.normalizer.momentum,
            norm_epsilon: self.normalizer.epsilon,
            ..CrfConfig::default()
        }
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let d = self.channels();
        let h = self.compat.hidden;
        let c = self.cond_dim();
        let f = &self.filters;
        vec![
            NamedTensor::vector("kernel.half", self.kernel.half().to_vec()),
            NamedTensor::new("compat.w1", vec![h, d], self.compat.w1.clone()),
            NamedTensor::vector("compat.b1", self.compat.b1.clone()),
            NamedTensor::new("compat.scale_gen", vec![h, c], self.compat.scale_gen.clone()),
            NamedTensor::vector("compat.scale_bias", self.compat.scale_bias.clone()),
            NamedTensor::new("compat.shift_gen", vec![h, c], self.compat.shift_gen.clone()),
            NamedTensor::vector("compat.shift_bias", self.compat.shift_bias.clone()),
            NamedTensor::new("compat.w2", vec![d, h], self.compat.w2.clone()),
            NamedTensor::vector("compat.b2", self.compat.b2.clone()),
            NamedTensor::new("compat_matrix.base", vec![d, d], self.compat_matrix.base.clone()),
            NamedTensor::new("compat_matrix.gen", vec![c, d, d], self.compat_matrix.gen.clone()),
            NamedTensor::new(
                "filters",
                vec![f.count(), f.height(), f.width(), f.channels()],
                f.coeffs().to_vec(),
            ),
            NamedTensor::vector("norm.gamma", self.normalizer.gamma.clone()),
            NamedTensor::vector("norm.beta", self.normalizer.beta.clone()),
            NamedTensor::vector("norm.running_mean", self.normalizer.running_mean.clone()),
            NamedTensor::vector("norm.running_var", self.normalizer.running_var.clone()),
        ]
    }

    pub fn from_tensors(
        cfg: &CrfConfig,
        track_batch_stats: bool,
        tensors: &[NamedTensor],
    ) -> Result<Self> {
        let mut p = Self::identity(cfg)?;
        let d = cfg.channels;
        let h = cfg.hidden;
        let c = cfg.cond_dim;
        let half_len = p.kernel.half().len();
        p.kernel = SpatialKernel::from_half(cfg.kernel_size, take_tensor(tensors, "kernel.half", half_len)?)?;
        p.compat.w1 = take_tensor(tensors, "compat.w1", h * d)?;
        p.compat.b1 = take_tensor(tensors, "compat.b1", h)?;
        p.compat.scale_gen = take_tensor(tensors, "compat.scale_gen", h * c)?;
        p.compat.scale_bias = take_tensor(tensors, "compat.scale_bias", h)?;
        p.compat.shift_gen = take_tensor(tensors, "compat.shift_gen", h * c)?;
        p.compat.shift_bias = take_tensor(tensors, "compat.shift_bias", h)?;
        p.compat.w2 = take_tensor(tensors, "compat.w2", d * h)?;
        p.compat.b2 = take_tensor(tensors, "compat.b2", d)?;
        p.compat_matrix.base = take_tensor(tensors, "compat_matrix.base", d * d)?;
        p.compat_matrix.gen = take_tensor(tensors, "compat_matrix.gen", c * d * d)?;
        let n = cfg.num_filters * cfg.filter_size * cfg.filter_size * d;
        p.filters.coeffs_mut().copy_from_slice(&take_tensor(tensors, "filters", n)?);
        p.normalizer.gamma = take_tensor(tensors, "norm.gamma", d)?;
        p.normalizer.beta = take_tensor(tensors, "norm.beta", d)?;
        p.normalizer.running_mean = take_tensor(tensors, "norm.running_mean", d)?;
        p.normalizer.running_var = take_tensor(tensors, "norm.running_var", d)?;
        p.normalizer.momentum = cfg.momentum;
        p.normalizer.track_batch_stats = track_batch_stats;
        Ok(p)
    }
}

impl ParamSet for CrfParams {
    fn param_names(&self) -> Vec<String> {
        [
            "kernel",
            "compat.w1",
            "compat.b1",
            "compat.scale_gen",
            "compat.scale_bias",
            "compat.shift_gen",
            "compat.shift_bias",
            "compat.w2",
            "compat.b2",
            "filters",
            "norm.gamma",
            "norm.beta",
        ]
        .map(String::from)
        .to_vec()
    }

    fn params(&self) -> Vec<&[f64]> {
        vec![
            self.kernel.half(),
            &self.compat.w1,
            &self.compat.b1,
            &self.compat.scale_gen,
            &self.compat.scale_bias,
            &self.compat.shift_gen,
            &self.compat.shift_bias,
            &self.compat.w2,
            &self.compat.b2,
            self.filters.coeffs(),
            &self.normalizer.gamma,
            &self.normalizer.beta,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.kernel.half_mut(),
            &mut self.compat.w1,
            &mut self.compat.b1,
            &mut self.compat.scale_gen,
            &mut self.compat.scale_bias,
            &mut self.compat.shift_gen,
            &mut self.compat.shift_bias,
            &mut self.compat.w2,
            &mut self.compat.b2,
            self.filters.coeffs_mut(),
            &mut self.normalizer.gamma,
            &mut self.normalizer.beta,
        ]
    }
}

/// Index of the filter block in [`CrfParams`]'s parameter order.
pub const FILTER_BLOCK: usize = 9;
