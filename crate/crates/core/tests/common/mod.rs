//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use latentcrf::crf::params::{CompatMatrix, CrfConfig, CrfParams, FilterBank, SpatialKernel};
use latentcrf::{LatentGrid, TextCondition};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn random_condition(rng: &mut ChaCha8Rng, dim: usize) -> TextCondition {
    TextCondition {
        class_id: 0,
        embedding: uniform_vec(rng, dim, -1.0, 1.0),
    }
}

/// A random instance with every CRF component active.
pub struct Instance {
    pub y: LatentGrid,
    pub x: LatentGrid,
    pub c: TextCondition,
    pub params: CrfParams,
}

pub fn random_instance(rng: &mut ChaCha8Rng, max_side: usize, max_channels: usize) -> Instance {
    let h = rng.gen_range(2..=max_side);
    let w = rng.gen_range(2..=max_side);
    let d = rng.gen_range(1..=max_channels);
    let kernel_size = if h.max(w) > 2 { 5 } else { 3 };
    let cfg = CrfConfig {
        channels: d,
        cond_dim: 3,
        hidden: 2 * d,
        kernel_size,
        num_filters: rng.gen_range(1..=3),
        ..CrfConfig::default()
    };
    let mut params = CrfParams::init(&cfg, rng).unwrap();
    let n_half = params.kernel.half().len();
    params.kernel = SpatialKernel::from_half(kernel_size, uniform_vec(rng, n_half, 0.0, 0.5)).unwrap();
    let n = params.filters.coeffs().len();
    params.filters = FilterBank::from_coeffs(cfg.num_filters, 3, 3, d, 3.0, uniform_vec(rng, n, -1.0, 1.0)).unwrap();
    params.compat_matrix.base = uniform_vec(rng, d * d, -1.0, 1.0);
    params.compat_matrix.gen = uniform_vec(rng, 3 * d * d, -0.5, 0.5);
    Instance {
        y: LatentGrid::randn(h, w, d, rng),
        x: LatentGrid::randn(h, w, d, rng),
        c: random_condition(rng, 3),
        params,
    }
}

/// Smallest |response| over all sites and filters, by explicit patches.
pub fn min_abs_response(y: &LatentGrid, f: &FilterBank) -> f64 {
    responses_oracle(y, f).iter().map(|r| r.abs()).fold(f64::INFINITY, f64::min)
}

/// Filter responses by explicit zero-padded patch extraction.
pub fn responses_oracle(y: &LatentGrid, f: &FilterBank) -> Vec<f64> {
    let (h, w, d) = y.shape();
    let (fh, fw) = (f.height() as isize, f.width() as isize);
    let mut out = Vec::new();
    for r in 0..h as isize {
        for c in 0..w as isize {
            for m in 0..f.count() {
                let mut patch = Vec::new();
                let mut coeffs = Vec::new();
                for a in 0..fh {
                    for b in 0..fw {
                        for ch in 0..d {
                            let (rr, cc) = (r + a - fh / 2, c + b - fw / 2);
                            let v = if rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize {
                                y.get(rr as usize, cc as usize, ch)
                            } else {
                                0.0
                            };
                            patch.push(v);
                            coeffs.push(f.get(m, a as usize, b as usize, ch));
                        }
                    }
                }
                out.push(patch.iter().zip(&coeffs).map(|(p, q)| p * q).sum());
            }
        }
    }
    out
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|r| (0..d).map(|k| m[r * d + k] * v[k]).sum()).collect()
}

/// `W(c)` assembled directly from its definition.
pub fn compat_oracle(cm: &CompatMatrix, c: &TextCondition) -> Vec<f64> {
    let d = cm.dim;
    let mut w = cm.base.clone();
    for (k, ck) in c.embedding.iter().enumerate() {
        for e in 0..d * d {
            w[e] += ck * cm.gen[k * d * d + e];
        }
    }
    w
}

/// Brute-force energy: explicit double loop over sites for the pairwise
/// term (each unordered pair once) and explicit patches for the filters.
pub fn energy_oracle(y: &LatentGrid, x: &LatentGrid, c: &TextCondition, p: &CrfParams) -> (f64, f64, f64) {
    let (h, w, d) = y.shape();
    let unary: f64 = (0..h * w * d)
        .map(|k| (y.as_slice()[k] - x.as_slice()[k]).powi(2))
        .sum();
    let wm = compat_oracle(&p.compat_matrix, c);
    let sites: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
    let mut pairwise = 0.0;
    for (a, &(ri, ci)) in sites.iter().enumerate() {
        for &(rj, cj) in sites.iter().skip(a + 1) {
            let wt = p.kernel.weight(rj as isize - ri as isize, cj as isize - ci as isize);
            let yi: Vec<f64> = (0..d).map(|k| y.get(ri, ci, k)).collect();
            let yj: Vec<f64> = (0..d).map(|k| y.get(rj, cj, k)).collect();
            let diff: Vec<f64> = yi.iter().zip(&yj).map(|(a, b)| a - b).collect();
            let proj = mat_vec(&wm, &diff);
            pairwise += wt * proj.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let ho: f64 = responses_oracle(y, &p.filters)
        .iter()
        .map(|&r| if r > 0.0 { -(r * r / 2.0).exp().ln() } else { -p.eps_phi.ln() })
        .sum();
    (unary, pairwise, ho)
}

/// Central differences of `f` around `v`, one coordinate at a time.
pub fn central_difference(v: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = v.to_vec();
    (0..v.len())
        .map(|i| {
            let orig = buf[i];
            buf[i] = orig + h;
            let fp = f(&buf);
            buf[i] = orig - h;
            let fm = f(&buf);
            buf[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(a.iter().map(|v| v * v).sum::<f64>().sqrt());
    if den == 0.0 {
        num
    } else {
        num / den
    }
}
