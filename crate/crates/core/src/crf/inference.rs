//! Unrolled mean-field inference and its reverse pass.
//!
//! One iteration computes
//! `y <- norm(x + compat(message_pass(y), c) + xi_HO(y))`
//! for every site in parallel. In training mode the normalizer uses batch
//! statistics pooled over all samples and sites, and the forward pass
//! records a [`Tape`] that [`backprop_crf`] walks in reverse.

use rayon::prelude::*;

use crate::crf::ops::{
    filter_adjoint, filter_coeff_gradient, filter_responses, kernel_table_gradient, spatial_message_pass,
};
use crate::crf::params::{CompatMatrix, CrfParams, Film, SpatialKernel, FILTER_BLOCK};
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, TextCondition};
use crate::params::{Grads, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-statistic updates and a recorded tape.
    Train,
    /// Frozen statistics; a pure function of its inputs.
    Infer,
}

/// Per-sample intermediates of one iteration, before normalization.
#[derive(Debug, Clone)]
struct SampleRecord {
    y: LatentGrid,
    msg: LatentGrid,
    lin: Vec<f64>,
    pre: Vec<f64>,
    resp: Vec<f64>,
}

#[derive(Debug, Clone)]
struct IterationRecord {
    samples: Vec<SampleRecord>,
    normalized: Vec<LatentGrid>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

/// Activations retained by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    films: Vec<Film>,
    conditions: Vec<Vec<f64>>,
    iterations: Vec<IterationRecord>,
}

impl Tape {
    pub fn num_iterations(&self) -> usize {
        self.iterations.len()
    }

    pub fn batch_size(&self) -> usize {
        self.films.len()
    }

    /// Smallest magnitude of any recorded ReLU input (compatibility
    /// pre-activations and filter responses). Finite-difference checks are
    /// only meaningful when this exceeds the probe step.
    pub fn min_kink_distance(&self) -> f64 {
        self.iterations
            .iter()
            .flat_map(|it| &it.samples)
            .flat_map(|s| s.pre.iter().chain(&s.resp))
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

fn check_inputs(x: &LatentGrid, c: &TextCondition, params: &CrfParams) -> Result<()> {
    if x.channels() != params.channels() {
        return Err(Error::shape(format!(
            "grid channels {} vs CRF channels {}",
            x.channels(),
            params.channels()
        )));
    }
    if c.dim() != params.cond_dim() {
        return Err(Error::shape(format!(
            "condition dim {} vs CRF condition dim {}",
            c.dim(),
            params.cond_dim()
        )));
    }
    Ok(())
}

/// `x + compat(message_pass(y), c) + xi_HO(y)`, optionally recording
/// the intermediates needed by the reverse pass.
fn pre_normalize(
    y: &LatentGrid,
    x: &LatentGrid,
    film: &Film,
    params: &CrfParams,
    record: bool,
) -> Result<(LatentGrid, Option<SampleRecord>)> {
    y.check_same_shape(x, "mean-field step")?;
    let (h, w, d) = y.shape();
    let hidden = params.compat.hidden;
    let msg = spatial_message_pass(y, &params.kernel)?;
    let mut resp = filter_responses(y, &params.filters)?;
    let mut v = x.clone();
    let mut lin = if record { vec![0.0; h * w * hidden] } else { Vec::new() };
    let mut pre = if record { vec![0.0; h * w * hidden] } else { Vec::new() };
    let mut out = vec![0.0; d];
    for i in 0..y.sites() {
        let (l, p) = if record {
            (
                Some(&mut lin[i * hidden..(i + 1) * hidden]),
                Some(&mut pre[i * hidden..(i + 1) * hidden]),
            )
        } else {
            (None, None)
        };
        params.compat.forward_site(msg.site(i), film, &mut out, l, p);
        for (vi, o) in v.site_mut(i).iter_mut().zip(&out) {
            *vi += o;
        }
    }
    let q: Vec<f64> = resp.iter().map(|r| 0.5 * r.max(0.0)).collect();
    let ho = filter_adjoint(&q, &params.filters, h, w);
    for (vi, t) in v.as_mut_slice().iter_mut().zip(ho.as_slice()) {
        *vi += t;
    }
    let rec = if record {
        Some(SampleRecord {
            y: y.clone(),
            msg,
            lin,
            pre,
            resp: std::mem::take(&mut resp),
        })
    } else {
        None
    };
    Ok((v, rec))
}

fn apply_affine(v: &mut LatentGrid, scale: &[f64], shift: &[f64]) {
    let d = v.channels();
    for site in v.as_mut_slice().chunks_exact_mut(d) {
        for ((val, s), b) in site.iter_mut().zip(scale).zip(shift) {
            *val = *val * s + b;
        }
    }
}

/// One inference-mode mean-field step.
pub fn mean_field_step(
    y: &LatentGrid,
    x: &LatentGrid,
    c: &TextCondition,
    params: &CrfParams,
) -> Result<LatentGrid> {
    check_inputs(x, c, params)?;
    let film = params.compat.film(c)?;
    let (mut v, _) = pre_normalize(y, x, &film, params, false)?;
    let (scale, shift) = params.normalizer.inference_affine();
    apply_affine(&mut v, &scale, &shift);
    Ok(v)
}

/// The CRF map `M`: `y <- x`, then `num_iterations` inference-mode steps.
pub fn crf_infer(x: &LatentGrid, c: &TextCondition, params: &CrfParams) -> Result<LatentGrid> {
    crf_infer_iterations(x, c, params, params.num_iterations)
}

pub fn crf_infer_iterations(
    x: &LatentGrid,
    c: &TextCondition,
    params: &CrfParams,
    iterations: usize,
) -> Result<LatentGrid> {
    check_inputs(x, c, params)?;
    let film = params.compat.film(c)?;
    let (scale, shift) = params.normalizer.inference_affine();
    let mut y = x.clone();
    for _ in 0..iterations {
        let (mut v, _) = pre_normalize(&y, x, &film, params, false)?;
        apply_affine(&mut v, &scale, &shift);
        y = v;
    }
    Ok(y)
}

/// Every iterate `y^(0) = x, y^(1), ..., y^(iterations)` in inference mode.
pub fn crf_infer_trajectory(
    x: &LatentGrid,
    c: &TextCondition,
    params: &CrfParams,
    iterations: usize,
) -> Result<Vec<LatentGrid>> {
    check_inputs(x, c, params)?;
    let film = params.compat.film(c)?;
    let (scale, shift) = params.normalizer.inference_affine();
    let mut out = Vec::with_capacity(iterations + 1);
    out.push(x.clone());
    for t in 0..iterations {
        let (mut v, _) = pre_normalize(&out[t], x, &film, params, false)?;
        apply_affine(&mut v, &scale, &shift);
        out.push(v);
    }
    Ok(out)
}

/// Normalizes a batch in place, updating running statistics when batch
/// statistics are in use. Returns the standardized values and `1/std`.
fn normalize_batch(vs: &mut [LatentGrid], params: &mut CrfParams) -> (Vec<LatentGrid>, Vec<f64>) {
    let norm = &mut params.normalizer;
    let d = norm.dim();
    let n = vs.iter().map(|v| v.sites()).sum::<usize>() as f64;
    let (mean, inv_std) = if norm.track_batch_stats {
        let mut mean = vec![0.0; d];
        for v in vs.iter() {
            for site in v.as_slice().chunks_exact(d) {
                for (m, s) in mean.iter_mut().zip(site) {
                    *m += s;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for v in vs.iter() {
            for site in v.as_slice().chunks_exact(d) {
                for ((acc, s), m) in var.iter_mut().zip(site).zip(&mean) {
                    *acc += (s - m) * (s - m);
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + norm.epsilon).sqrt()).collect();
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for ch in 0..d {
            norm.running_mean[ch] = norm.momentum * norm.running_mean[ch] + (1.0 - norm.momentum) * mean[ch];
            norm.running_var[ch] =
                norm.momentum * norm.running_var[ch] + (1.0 - norm.momentum) * var[ch] * unbias;
        }
        (mean, inv_std)
    } else {
        let inv_std = norm.running_var.iter().map(|v| 1.0 / (v + norm.epsilon).sqrt()).collect();
        (norm.running_mean.clone(), inv_std)
    };

    let mut normalized = Vec::with_capacity(vs.len());
    if norm.track_batch_stats {
        for v in vs.iter_mut() {
            let mut hat = v.clone();
            for site in hat.as_mut_slice().chunks_exact_mut(d) {
                for ch in 0..d {
                    site[ch] = (site[ch] - mean[ch]) * inv_std[ch];
                }
            }
            for (os, hs) in v.as_mut_slice().chunks_exact_mut(d).zip(hat.as_slice().chunks_exact(d)) {
                for ch in 0..d {
                    os[ch] = norm.gamma[ch] * hs[ch] + norm.beta[ch];
                }
            }
            normalized.push(hat);
        }
    } else {
        let (scale, shift) = norm.inference_affine();
        for v in vs.iter_mut() {
            let mut hat = v.clone();
            for site in hat.as_mut_slice().chunks_exact_mut(d) {
                for ch in 0..d {
                    site[ch] = (site[ch] - mean[ch]) * inv_std[ch];
                }
            }
            apply_affine(v, &scale, &shift);
            normalized.push(hat);
        }
    }
    (normalized, inv_std)
}

/// One training-mode step over a batch: batch statistics are pooled over
/// every sample and site, and running statistics are updated.
pub fn mean_field_step_train(
    ys: &[LatentGrid],
    xs: &[LatentGrid],
    cs: &[TextCondition],
    params: &mut CrfParams,
) -> Result<Vec<LatentGrid>> {
    check_batch(xs, cs, params)?;
    if ys.len() != xs.len() {
        return Err(Error::shape("state and observation batch sizes differ"));
    }
    let films = cs.iter().map(|c| params.compat.film(c)).collect::<Result<Vec<_>>>()?;
    let p: &CrfParams = params;
    let mut vs = ys
        .par_iter()
        .zip(xs.par_iter())
        .zip(films.par_iter())
        .map(|((y, x), f)| pre_normalize(y, x, f, p, false).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    normalize_batch(&mut vs, params);
    Ok(vs)
}

fn check_batch(xs: &[LatentGrid], cs: &[TextCondition], params: &CrfParams) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if xs.len() != cs.len() {
        return Err(Error::shape("grid and condition batch sizes differ"));
    }
    for (x, c) in xs.iter().zip(cs) {
        check_inputs(x, c, params)?;
        x.check_same_shape(&xs[0], "batch grids")?;
    }
    Ok(())
}

/// Runs `M` over a batch. In [`Mode::Train`] the normalizer uses batch
/// statistics (and updates its running estimates) and a tape is returned.
pub fn crf_infer_batch(
    xs: &[LatentGrid],
    cs: &[TextCondition],
    params: &mut CrfParams,
    mode: Mode,
) -> Result<(Vec<LatentGrid>, Option<Tape>)> {
    check_batch(xs, cs, params)?;
    if mode == Mode::Infer {
        let p: &CrfParams = params;
        let out = xs
            .par_iter()
            .zip(cs.par_iter())
            .map(|(x, c)| crf_infer(x, c, p))
            .collect::<Result<Vec<_>>>()?;
        return Ok((out, None));
    }
    let films = cs.iter().map(|c| params.compat.film(c)).collect::<Result<Vec<_>>>()?;
    let mut ys: Vec<LatentGrid> = xs.to_vec();
    let mut iterations = Vec::with_capacity(params.num_iterations);
    for _ in 0..params.num_iterations {
        let p: &CrfParams = params;
        let (mut vs, samples): (Vec<_>, Vec<_>) = ys
            .par_iter()
            .zip(xs.par_iter())
            .zip(films.par_iter())
            .map(|((y, x), f)| pre_normalize(y, x, f, p, true).map(|(v, r)| (v, r.expect("recorded"))))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let batch_stats = params.normalizer.track_batch_stats;
        let (normalized, inv_std) = normalize_batch(&mut vs, params);
        iterations.push(IterationRecord {
            samples,
            normalized,
            inv_std,
            batch_stats,
        });
        ys = vs;
    }
    let tape = Tape {
        films,
        conditions: cs.iter().map(|c| c.embedding.clone()).collect(),
        iterations,
    };
    Ok((ys, Some(tape)))
}

/// Reverse pass through a recorded forward: given `dL/dy_T` per sample,
/// returns parameter gradients in [`CrfParams`]'s [`ParamSet`] order.
pub fn backprop_crf(params: &CrfParams, tape: Option<&Tape>, grad_out: &[LatentGrid]) -> Result<Grads> {
    let tape = tape.ok_or(Error::TapeMissing)?;
    if grad_out.len() != tape.batch_size() {
        return Err(Error::shape("output gradient batch size vs tape"));
    }
    let d = params.channels();
    let net = &params.compat;
    let hidden = net.hidden;
    let cond_dim = net.cond_dim;
    let mut grads = params.zero_grads();
    let mut kernel_full = vec![0.0; params.kernel.size() * params.kernel.size()];
    let mut gy: Vec<LatentGrid> = grad_out.to_vec();

    for it in tape.iterations.iter().rev() {
        // Normalizer.
        let n = it.normalized.iter().map(|g| g.sites()).sum::<usize>() as f64;
        let gamma = &params.normalizer.gamma;
        let mut g_gamma = vec![0.0; d];
        let mut g_beta = vec![0.0; d];
        for (g, hat) in gy.iter().zip(&it.normalized) {
            for (gs, hs) in g.as_slice().chunks_exact(d).zip(hat.as_slice().chunks_exact(d)) {
                for ch in 0..d {
                    g_gamma[ch] += gs[ch] * hs[ch];
                    g_beta[ch] += gs[ch];
                }
            }
        }
        let gv: Vec<LatentGrid> = if it.batch_stats {
            // mean(g_hat) = gamma * g_beta / n, mean(g_hat * hat) = gamma * g_gamma / n
            let m1: Vec<f64> = (0..d).map(|ch| gamma[ch] * g_beta[ch] / n).collect();
            let m2: Vec<f64> = (0..d).map(|ch| gamma[ch] * g_gamma[ch] / n).collect();
            gy.iter()
                .zip(&it.normalized)
                .map(|(g, hat)| {
                    let mut out = g.clone();
                    for (os, hs) in out.as_mut_slice().chunks_exact_mut(d).zip(hat.as_slice().chunks_exact(d)) {
                        for ch in 0..d {
                            let gh = os[ch] * gamma[ch];
                            os[ch] = it.inv_std[ch] * (gh - m1[ch] - hs[ch] * m2[ch]);
                        }
                    }
                    out
                })
                .collect()
        } else {
            gy.iter()
                .map(|g| {
                    let mut out = g.clone();
                    for os in out.as_mut_slice().chunks_exact_mut(d) {
                        for ch in 0..d {
                            os[ch] *= gamma[ch] * it.inv_std[ch];
                        }
                    }
                    out
                })
                .collect()
        };
        for ch in 0..d {
            grads.0[10][ch] += g_gamma[ch];
            grads.0[11][ch] += g_beta[ch];
        }

        // Per-sample pre-normalization reverse pass.
        let partials = it
            .samples
            .par_iter()
            .zip(gv.par_iter())
            .zip(tape.films.par_iter())
            .zip(tape.conditions.par_iter())
            .map(|(((rec, g), film), cond)| sample_backward(params, rec, g, film, cond))
            .collect::<Vec<_>>();

        let mut next = Vec::with_capacity(partials.len());
        for mut p in partials {
            for (a, b) in kernel_full.iter_mut().zip(&p.kernel_full) {
                *a += b;
            }
            for (block, src) in [
                (1, &p.w1),
                (2, &p.b1),
                (7, &p.w2),
                (8, &p.b2),
                (FILTER_BLOCK, &p.filters),
            ] {
                for (a, b) in grads.0[block].iter_mut().zip(src.iter()) {
                    *a += b;
                }
            }
            for h in 0..hidden {
                for k in 0..cond_dim {
                    grads.0[3][h * cond_dim + k] += p.g_scale[h] * p.cond[k];
                    grads.0[5][h * cond_dim + k] += p.g_shift[h] * p.cond[k];
                }
                grads.0[4][h] += p.g_scale[h];
                grads.0[6][h] += p.g_shift[h];
            }
            next.push(std::mem::replace(&mut p.gy, LatentGrid::zeros(1, 1, 1)));
        }
        gy = next;
    }

    grads.0[0] = params.kernel.fold_gradient(&kernel_full);
    for (i, g) in grads.0[FILTER_BLOCK].iter_mut().enumerate() {
        if params.filters.is_center(i) {
            *g = 0.0;
        }
    }
    Ok(grads)
}

struct SamplePartial {
    gy: LatentGrid,
    kernel_full: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    g_scale: Vec<f64>,
    g_shift: Vec<f64>,
    filters: Vec<f64>,
    cond: Vec<f64>,
}

fn sample_backward(
    params: &CrfParams,
    rec: &SampleRecord,
    gv: &LatentGrid,
    film: &Film,
    cond: &[f64],
) -> SamplePartial {
    let (h, w, d) = rec.y.shape();
    let net = &params.compat;
    let hidden = net.hidden;
    let mut p = SamplePartial {
        gy: LatentGrid::zeros(h, w, d),
        kernel_full: Vec::new(),
        w1: vec![0.0; net.w1.len()],
        b1: vec![0.0; hidden],
        w2: vec![0.0; net.w2.len()],
        b2: vec![0.0; d],
        g_scale: vec![0.0; hidden],
        g_shift: vec![0.0; hidden],
        filters: vec![0.0; params.filters.coeffs().len()],
        cond: cond.to_vec(),
    };

    // Compatibility network, site by site.
    let mut g_msg = LatentGrid::zeros(h, w, d);
    let mut g_lin = vec![0.0; hidden];
    for i in 0..rec.y.sites() {
        let gs = gv.site(i);
        let lin = &rec.lin[i * hidden..(i + 1) * hidden];
        let pre = &rec.pre[i * hidden..(i + 1) * hidden];
        for k in 0..d {
            p.b2[k] += gs[k];
        }
        for hh in 0..hidden {
            let a = pre[hh].max(0.0);
            let mut g_a = 0.0;
            for k in 0..d {
                p.w2[k * hidden + hh] += gs[k] * a;
                g_a += net.w2[k * hidden + hh] * gs[k];
            }
            let g_pre = if pre[hh] > 0.0 { g_a } else { 0.0 };
            p.g_scale[hh] += g_pre * lin[hh];
            p.g_shift[hh] += g_pre;
            g_lin[hh] = g_pre * film.scale[hh];
            p.b1[hh] += g_lin[hh];
        }
        let m = rec.msg.site(i);
        let gm = g_msg.site_mut(i);
        for hh in 0..hidden {
            let gl = g_lin[hh];
            if gl == 0.0 {
                continue;
            }
            for k in 0..d {
                p.w1[hh * d + k] += gl * m[k];
                gm[k] += net.w1[hh * d + k] * gl;
            }
        }
    }

    // Message pass: the symmetric kernel makes the operator self-adjoint.
    p.kernel_full = kernel_table_gradient(&rec.y, &g_msg, params.kernel.size());
    p.gy = spatial_message_pass(&g_msg, &params.kernel).expect("window validated in forward");

    // Higher-order term: v += A^T q with q = relu(resp) / 2.
    let filters = &params.filters;
    let q: Vec<f64> = rec.resp.iter().map(|r| 0.5 * r.max(0.0)).collect();
    filter_coeff_gradient(gv, &q, filters, &mut p.filters);
    let g_q = filter_responses(gv, filters).expect("filters validated in forward");
    let g_resp: Vec<f64> = g_q
        .iter()
        .zip(&rec.resp)
        .map(|(g, r)| if *r > 0.0 { 0.5 * g } else { 0.0 })
        .collect();
    let back = filter_adjoint(&g_resp, filters, h, w);
    for (a, b) in p.gy.as_mut_slice().iter_mut().zip(back.as_slice()) {
        *a += b;
    }
    filter_coeff_gradient(&rec.y, &g_resp, filters, &mut p.filters);
    p
}

/// Parallel mean field on the quadratic energy with the linear compatibility
/// `A = W(c)^T W(c)` and an exact per-site solve in place of normalization:
/// `y_i <- K_i^{-1} (x_i + A sum_j W^s_ij y_j)`, all sites at once.
pub fn quadratic_mean_field(
    x: &LatentGrid,
    c: &TextCondition,
    kernel: &SpatialKernel,
    compat: &CompatMatrix,
    iterations: usize,
) -> Result<LatentGrid> {
    let (h, w, d) = x.shape();
    let solvers = crate::crf::oracle::site_solvers(x, c, kernel, compat)?;
    let a = compat.gram(c)?;
    let mut y = x.clone();
    let mut rhs = vec![0.0; d];
    for _ in 0..iterations {
        let msg = spatial_message_pass(&y, kernel)?;
        let mut next = LatentGrid::zeros(h, w, d);
        for i in 0..x.sites() {
            let (xi, mi) = (x.site(i), msg.site(i));
            for r in 0..d {
                rhs[r] = xi[r] + (0..d).map(|k| a[r * d + k] * mi[k]).sum::<f64>();
            }
            next.site_mut(i).copy_from_slice(&solvers[i].solve(&rhs));
        }
        y = next;
    }
    Ok(y)
}
