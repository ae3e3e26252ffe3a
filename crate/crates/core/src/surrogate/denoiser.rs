//! Small convolutional noise predictor standing in for a latent U-Net.
//!
//! Each hidden layer is a same-padded 3x3 convolution whose output receives
//! per-channel biases projected from a sinusoidal timestep embedding and
//! from the condition embedding, followed by ReLU. A final convolution maps
//! back to the latent channels, added to a direct convolution of the input.
//! A global path feeds the per-channel input mean into the first layer and
//! adds a linear read-out of the pooled last hidden layer to every site, so
//! the per-sample mean of the noise is predicted without relying on the
//! receptive field.
//!
//! The network regresses the velocity `v = sqrt(ab) eps - sqrt(1 - ab) z0`;
//! noise estimates are recovered as `eps = sqrt(ab) v + sqrt(1 - ab) z_t`,
//! which keeps the implied clean latent bounded at very low signal levels.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::nn::{relu_backward, relu_inplace, Conv2d, Geometry};
use crate::params::{take_tensor, Grads, NamedTensor, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            widths: vec![24, 48, 48, 24],
            kernel: 3,
            time_dim: 16,
            cond_dim: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    /// Hidden layers followed by the output layer.
    pub convs: Vec<Conv2d>,
    /// Per hidden layer, `width x time_dim`.
    pub time_proj: Vec<Vec<f64>>,
    /// Per hidden layer, `width x cond_dim`.
    pub cond_proj: Vec<Vec<f64>>,
    /// Long skip from the input straight to the output.
    pub skip: Conv2d,
    /// `widths[0] x channels`: pooled input into the first layer's bias.
    pub pool_in: Vec<f64>,
    /// `channels x widths[last]`: pooled last hidden layer to an output offset.
    pub pool_out: Vec<f64>,
}

/// Sinusoidal embedding of an integer timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Regression target for a clean latent `z0` noised with `eps` at `ab`.
pub fn velocity_target(z0: &LatentGrid, eps: &LatentGrid, ab: f64) -> LatentGrid {
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    eps.zip_map(z0, |e, x| a * e - s * x)
}

/// Noise estimate implied by a velocity estimate at state `z_t`.
pub fn eps_from_velocity(z_t: &LatentGrid, v: &LatentGrid, ab: f64) -> LatentGrid {
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    v.zip_map(z_t, |vv, z| a * vv + s * z)
}

/// Activations retained for the backward pass.
pub struct DenoiserCache {
    geometry: Geometry,
    cols: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    temb: Vec<Vec<f64>>,
    conds: Vec<Vec<f64>>,
    input_mean: Vec<Vec<f64>>,
}

/// Per-sample channel means of a flat `batch x sites x ch` buffer.
fn channel_means(x: &[f64], g: Geometry, ch: usize) -> Vec<Vec<f64>> {
    x.chunks_exact(g.sites() * ch)
        .map(|sample| {
            let mut m = vec![0.0; ch];
            for row in sample.chunks_exact(ch) {
                m.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            m.iter_mut().for_each(|a| *a /= g.sites() as f64);
            m
        })
        .collect()
}

impl DenoiserParams {
    pub fn init<R: Rng + ?Sized>(config: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        if config.widths.is_empty() || config.channels == 0 {
            return Err(Error::invalid("denoiser needs at least one hidden layer"));
        }
        let mut convs = Vec::new();
        let mut time_proj = Vec::new();
        let mut cond_proj = Vec::new();
        let mut in_ch = config.channels;
        for &w in &config.widths {
            convs.push(Conv2d::init(in_ch, w, config.kernel, 1.0, rng));
            let ts = 1.0 / (config.time_dim as f64).sqrt();
            let cs = 1.0 / (config.cond_dim.max(1) as f64).sqrt();
            time_proj.push((0..w * config.time_dim).map(|_| ts * rng.gen_range(-1.0..1.0)).collect());
            cond_proj.push((0..w * config.cond_dim).map(|_| cs * rng.gen_range(-1.0..1.0)).collect());
            in_ch = w;
        }
        convs.push(Conv2d::init(in_ch, config.channels, config.kernel, 0.5, rng));
        let skip = Conv2d::init(config.channels, config.channels, config.kernel, 0.5, rng);
        let d = config.channels;
        let (first, last) = (config.widths[0], in_ch);
        let ps = 1.0 / (d as f64).sqrt();
        let pool_in = (0..first * d).map(|_| ps * rng.gen_range(-1.0..1.0)).collect();
        let os = 0.5 / (last as f64).sqrt();
        let pool_out = (0..d * last).map(|_| os * rng.gen_range(-1.0..1.0)).collect();
        Ok(Self {
            config: config.clone(),
            convs,
            time_proj,
            cond_proj,
            skip,
            pool_in,
            pool_out,
        })
    }

    /// Multiply-adds (times two) of one forward call on an `h x w` grid.
    pub fn flops_per_call(&self, height: usize, width: usize) -> usize {
        let sites = height * width;
        let conv: usize = self.convs.iter().chain([&self.skip]).map(|c| c.flops_per_site() * sites).sum();
        let proj: usize = self
            .config
            .widths
            .iter()
            .map(|w| 2 * w * (self.config.time_dim + self.config.cond_dim) + w * sites)
            .sum();
        let global = 2 * (self.pool_in.len() + self.pool_out.len()) + (self.config.channels + self.last_width()) * sites;
        conv + proj + global
    }

    fn check(&self, zs: &[LatentGrid], ts: &[usize], conds: &[Vec<f64>]) -> Result<Geometry> {
        if zs.is_empty() {
            return Err(Error::invalid("empty denoiser batch"));
        }
        if zs.len() != ts.len() || zs.len() != conds.len() {
            return Err(Error::shape("denoiser batch lengths differ"));
        }
        let (h, w, d) = zs[0].shape();
        if d != self.config.channels {
            return Err(Error::shape(format!("denoiser expects {} channels, got {d}", self.config.channels)));
        }
        for (z, c) in zs.iter().zip(conds) {
            z.check_same_shape(&zs[0], "denoiser batch")?;
            if c.len() != self.config.cond_dim {
                return Err(Error::shape("denoiser condition dim"));
            }
        }
        Ok(Geometry::new(zs.len(), h, w))
    }

    fn layer_bias(&self, layer: usize, temb: &[f64], cond: &[f64]) -> Vec<f64> {
        let width = self.config.widths[layer];
        let (td, cd) = (self.config.time_dim, self.config.cond_dim);
        (0..width)
            .map(|o| {
                let t: f64 = self.time_proj[layer][o * td..(o + 1) * td].iter().zip(temb).map(|(a, b)| a * b).sum();
                let c: f64 = self.cond_proj[layer][o * cd..(o + 1) * cd].iter().zip(cond).map(|(a, b)| a * b).sum();
                t + c
            })
            .collect()
    }

    fn last_width(&self) -> usize {
        *self.config.widths.last().expect("at least one hidden layer")
    }

    fn run(
        &self,
        zs: &[LatentGrid],
        ts: &[usize],
        conds: &[Vec<f64>],
        keep: bool,
    ) -> Result<(Vec<f64>, Option<DenoiserCache>)> {
        let g = self.check(zs, ts, conds)?;
        let temb: Vec<Vec<f64>> = ts.iter().map(|&t| timestep_embedding(t, self.config.time_dim)).collect();
        let mut h: Vec<f64> = zs.iter().flat_map(|z| z.as_slice().iter().copied()).collect();
        let d = self.config.channels;
        let input_mean = channel_means(&h, g, d);
        let mut all_cols = Vec::new();
        let mut hidden = Vec::new();
        let mut skip_out = Vec::new();
        let n_hidden = self.config.widths.len();
        for (l, conv) in self.convs.iter().enumerate() {
            let (mut out, cols) = conv.forward(&h, g);
            if l == 0 {
                skip_out = self.skip.forward_cols(&cols, g);
            }
            if l < n_hidden {
                let width = conv.out_ch;
                for (b, (te, c)) in temb.iter().zip(conds).enumerate() {
                    let mut bias = self.layer_bias(l, te, c);
                    if l == 0 {
                        for (o, bb) in bias.iter_mut().enumerate() {
                            *bb += dot(&self.pool_in[o * d..(o + 1) * d], &input_mean[b]);
                        }
                    }
                    for row in out[b * g.sites() * width..(b + 1) * g.sites() * width].chunks_exact_mut(width) {
                        for (v, bb) in row.iter_mut().zip(&bias) {
                            *v += bb;
                        }
                    }
                }
                relu_inplace(&mut out);
                if keep {
                    hidden.push(out.clone());
                }
            } else {
                let last = self.last_width();
                for (b, m) in channel_means(&h, g, last).iter().enumerate() {
                    let offset: Vec<f64> = (0..d).map(|k| dot(&self.pool_out[k * last..(k + 1) * last], m)).collect();
                    for row in out[b * g.sites() * d..(b + 1) * g.sites() * d].chunks_exact_mut(d) {
                        row.iter_mut().zip(&offset).for_each(|(v, o)| *v += o);
                    }
                }
            }
            if keep {
                all_cols.push(cols);
            }
            h = out;
        }
        for (v, s) in h.iter_mut().zip(&skip_out) {
            *v += s;
        }
        let cache = keep.then(|| DenoiserCache {
            geometry: g,
            cols: all_cols,
            hidden,
            temb,
            conds: conds.to_vec(),
            input_mean,
        });
        Ok((h, cache))
    }

    /// Predicted noise for each `(z_t, t, condition)`, where `alpha_bars`
    /// holds the signal level of each `t`.
    pub fn predict_eps(
        &self,
        zs: &[LatentGrid],
        ts: &[usize],
        alpha_bars: &[f64],
        conds: &[Vec<f64>],
    ) -> Result<Vec<LatentGrid>> {
        if alpha_bars.len() != zs.len() {
            return Err(Error::shape("one signal level per sample is required"));
        }
        let v = self.predict(zs, ts, conds)?;
        Ok(zs
            .iter()
            .zip(&v)
            .zip(alpha_bars)
            .map(|((z, v), &ab)| eps_from_velocity(z, v, ab))
            .collect())
    }

    /// Raw network output (velocity) for each `(z_t, t, condition)`.
    pub fn predict(&self, zs: &[LatentGrid], ts: &[usize], conds: &[Vec<f64>]) -> Result<Vec<LatentGrid>> {
        let (out, _) = self.run(zs, ts, conds, false)?;
        let (h, w, d) = zs[0].shape();
        out.chunks_exact(h * w * d)
            .map(|c| LatentGrid::from_vec(h, w, d, c.to_vec()))
            .collect()
    }

    /// Forward pass retaining activations; the output is the flat batch.
    pub fn forward_train(&self, zs: &[LatentGrid], ts: &[usize], conds: &[Vec<f64>]) -> Result<(Vec<f64>, DenoiserCache)> {
        let (out, cache) = self.run(zs, ts, conds, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    /// Parameter gradients for the flat output gradient `g_out`.
    pub fn backward(&self, cache: &DenoiserCache, g_out: &[f64]) -> Grads {
        let g = cache.geometry;
        let mut grads = self.zero_grads();
        let n_hidden = self.config.widths.len();
        let (td, cd) = (self.config.time_dim, self.config.cond_dim);
        let sb = self.skip_block();
        let (mut gw, mut gb) = (std::mem::take(&mut grads.0[sb]), std::mem::take(&mut grads.0[sb + 1]));
        self.skip.backward(&cache.cols[0], g_out, g, &mut gw, &mut gb, false);
        grads.0[sb] = gw;
        grads.0[sb + 1] = gb;
        let d = self.config.channels;
        let last = self.last_width();
        let po = self.pool_block() + 1;
        // Per-sample output-offset gradients, shared by every site.
        let g_offset = channel_means(g_out, g, d);
        let pooled_last = channel_means(&cache.hidden[n_hidden - 1], g, last);
        for (go, m) in g_offset.iter().zip(&pooled_last) {
            for k in 0..d {
                for j in 0..last {
                    grads.0[po][k * last + j] += go[k] * g.sites() as f64 * m[j];
                }
            }
        }
        let mut gy = g_out.to_vec();
        for l in (0..self.convs.len()).rev() {
            let conv = &self.convs[l];
            if l < n_hidden {
                relu_backward(&cache.hidden[l], &mut gy);
                let width = conv.out_ch;
                let (tp, cp) = (self.time_block(l), self.cond_block(l));
                for b in 0..g.batch {
                    let mut gbias = vec![0.0; width];
                    for row in gy[b * g.sites() * width..(b + 1) * g.sites() * width].chunks_exact(width) {
                        for (acc, v) in gbias.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    if l == 0 {
                        let pi = self.pool_block();
                        for o in 0..width {
                            for k in 0..d {
                                grads.0[pi][o * d + k] += gbias[o] * cache.input_mean[b][k];
                            }
                        }
                    }
                    for o in 0..width {
                        for j in 0..td {
                            grads.0[tp][o * td + j] += gbias[o] * cache.temb[b][j];
                        }
                        for j in 0..cd {
                            grads.0[cp][o * cd + j] += gbias[o] * cache.conds[b][j];
                        }
                    }
                }
            }
            let (wb, bb) = (2 * l, 2 * l + 1);
            let mut gw = std::mem::take(&mut grads.0[wb]);
            let mut gb = std::mem::take(&mut grads.0[bb]);
            let gx = conv.backward(&cache.cols[l], &gy, g, &mut gw, &mut gb, l > 0);
            grads.0[wb] = gw;
            grads.0[bb] = gb;
            if let Some(mut gx) = gx {
                if l == n_hidden {
                    for (sample, go) in gx.chunks_exact_mut(g.sites() * last).zip(&g_offset) {
                        let gm: Vec<f64> = (0..last)
                            .map(|j| (0..d).map(|k| self.pool_out[k * last + j] * go[k]).sum())
                            .collect();
                        for row in sample.chunks_exact_mut(last) {
                            row.iter_mut().zip(&gm).for_each(|(a, v)| *a += v);
                        }
                    }
                }
                gy = gx;
            }
        }
        grads
    }

    fn time_block(&self, layer: usize) -> usize {
        2 * self.convs.len() + 2 * layer
    }

    fn cond_block(&self, layer: usize) -> usize {
        2 * self.convs.len() + 2 * layer + 1
    }

    fn skip_block(&self) -> usize {
        2 * self.convs.len() + 2 * self.config.widths.len()
    }

    fn pool_block(&self) -> usize {
        self.skip_block() + 2
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push(NamedTensor::new(
                format!("conv{i}.weight"),
                vec![c.out_ch, c.k, c.k, c.in_ch],
                c.weight.clone(),
            ));
            out.push(NamedTensor::vector(format!("conv{i}.bias"), c.bias.clone()));
        }
        for (l, &w) in self.config.widths.iter().enumerate() {
            out.push(NamedTensor::new(format!("time{l}"), vec![w, self.config.time_dim], self.time_proj[l].clone()));
            out.push(NamedTensor::new(format!("cond{l}"), vec![w, self.config.cond_dim], self.cond_proj[l].clone()));
        }
        let s = &self.skip;
        out.push(NamedTensor::new("skip.weight", vec![s.out_ch, s.k, s.k, s.in_ch], s.weight.clone()));
        out.push(NamedTensor::vector("skip.bias", s.bias.clone()));
        let d = self.config.channels;
        out.push(NamedTensor::new("pool_in", vec![self.config.widths[0], d], self.pool_in.clone()));
        out.push(NamedTensor::new("pool_out", vec![d, self.last_width()], self.pool_out.clone()));
        out
    }

    pub fn from_tensors(config: &DenoiserConfig, tensors: &[NamedTensor]) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p = Self::init(config, &mut rng)?;
        for (i, c) in p.convs.iter_mut().enumerate() {
            c.weight = take_tensor(tensors, &format!("conv{i}.weight"), c.weight.len())?;
            c.bias = take_tensor(tensors, &format!("conv{i}.bias"), c.bias.len())?;
        }
        for l in 0..config.widths.len() {
            p.time_proj[l] = take_tensor(tensors, &format!("time{l}"), p.time_proj[l].len())?;
            p.cond_proj[l] = take_tensor(tensors, &format!("cond{l}"), p.cond_proj[l].len())?;
        }
        p.skip.weight = take_tensor(tensors, "skip.weight", p.skip.weight.len())?;
        p.skip.bias = take_tensor(tensors, "skip.bias", p.skip.bias.len())?;
        p.pool_in = take_tensor(tensors, "pool_in", p.pool_in.len())?;
        p.pool_out = take_tensor(tensors, "pool_out", p.pool_out.len())?;
        Ok(p)
    }
}

impl ParamSet for DenoiserParams {
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.convs.len() {
            names.push(format!("conv{i}.weight"));
            names.push(format!("conv{i}.bias"));
        }
        for l in 0..self.config.widths.len() {
            names.push(format!("time{l}"));
            names.push(format!("cond{l}"));
        }
        names.push("skip.weight".into());
        names.push("skip.bias".into());
        names.push("pool_in".into());
        names.push("pool_out".into());
        names
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        for (t, c) in self.time_proj.iter().zip(&self.cond_proj) {
            out.push(t);
            out.push(c);
        }
        out.push(&self.skip.weight);
        out.push(&self.skip.bias);
        out.push(&self.pool_in);
        out.push(&self.pool_out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in self.convs.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for (t, c) in self.time_proj.iter_mut().zip(self.cond_proj.iter_mut()) {
            out.push(t);
            out.push(c);
        }
        out.push(&mut self.skip.weight);
        out.push(&mut self.skip.bias);
        out.push(&mut self.pool_in);
        out.push(&mut self.pool_out);
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            channels: 2,
            widths: vec![3, 4],
            kernel: 3,
            time_dim: 4,
            cond_dim: 2,
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = DenoiserParams::init(&tiny(), &mut rng).unwrap();
        let zs = vec![LatentGrid::randn(3, 4, 2, &mut rng); 2];
        let out = p.predict(&zs, &[5, 900], &[vec![0.1, 0.2], vec![0.0, 0.0]]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].shape(), (3, 4, 2));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = DenoiserParams::init(&tiny(), &mut rng).unwrap();
        let zs: Vec<_> = (0..2).map(|_| LatentGrid::randn(3, 3, 2, &mut rng)).collect();
        let ts = [17, 640];
        let conds = vec![vec![0.4, -0.3], vec![-0.2, 0.9]];
        let r: Vec<f64> = (0..2 * 9 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |p: &DenoiserParams| -> f64 {
            let (o, _) = p.forward_train(&zs, &ts, &conds).unwrap();
            o.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = p.forward_train(&zs, &ts, &conds).unwrap();
        let grads = p.backward(&cache, &r);
        let h = 1e-6;
        for bi in 0..p.params().len() {
            for i in 0..p.params()[bi].len() {
                let mut q = p.clone();
                q.params_mut()[bi][i] += h;
                let fp = loss(&q);
                q.params_mut()[bi][i] -= 2.0 * h;
                let fm = loss(&q);
                let num = (fp - fm) / (2.0 * h);
                assert!((num - grads.0[bi][i]).abs() < 1e-5, "block {bi} idx {i}: {num} vs {}", grads.0[bi][i]);
            }
        }
    }

    #[test]
    fn tensor_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DenoiserParams::init(&tiny(), &mut rng).unwrap();
        let q = DenoiserParams::from_tensors(&tiny(), &p.to_tensors()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn default_is_an_order_of_magnitude_costlier_than_crf() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = DenoiserParams::init(&DenoiserConfig::default(), &mut rng).unwrap();
        let crf = crate::crf::CrfParams::identity(&crate::crf::CrfConfig::default()).unwrap();
        assert!(p.param_count() > 10 * crf.total_parameter_count());
        assert!(p.flops_per_call(8, 8) >= 10 * crf.flops_per_call(8, 8));
    }
}
