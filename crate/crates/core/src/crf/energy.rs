//! The CRF energy and its analytic gradient.
//!
//! Pairwise terms are summed once per unordered site pair, so the gradient
//! carries a single factor of two and the per-site exact update uses
//! `K = I + W(c)^T W(c) sum_j W^s_ij`.

use crate::crf::ops::{check_window, filter_adjoint, filter_responses, site_weight_sums, spatial_message_pass};
use crate::crf::params::{CompatMatrix, CrfParams, FilterBank, SpatialKernel};
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, TextCondition};

/// `phi(y) = exp(y^2 / 2)` for `y > 0`, else `eps`.
pub fn phi(y: f64, eps: f64) -> f64 {
    if y > 0.0 {
        (0.5 * y * y).exp()
    } else {
        eps
    }
}

/// `-log phi(y)`, evaluated without overflow for large responses.
pub fn neg_log_phi(y: f64, eps: f64) -> f64 {
    if y > 0.0 {
        -0.5 * y * y
    } else {
        -eps.ln()
    }
}

/// `omega(y) = max(y, 0)`, the derivative of `log phi` away from zero.
pub fn omega(y: f64) -> f64 {
    y.max(0.0)
}

/// Per-term energy values. `total` is accumulated unary, then pairwise,
/// then higher-order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    pub unary: f64,
    pub pairwise: f64,
    pub higher_order: f64,
    pub total: f64,
}

pub fn unary_energy(y: &LatentGrid, x: &LatentGrid) -> Result<f64> {
    y.check_same_shape(x, "unary energy")?;
    Ok(y.as_slice()
        .iter()
        .zip(x.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// `W(c) y_i` for every site.
fn project_sites(y: &LatentGrid, w: &[f64]) -> LatentGrid {
    let d = y.channels();
    let mut out = LatentGrid::zeros(y.height(), y.width(), d);
    for i in 0..y.sites() {
        let src = y.site(i);
        let dst = out.site_mut(i);
        for (r, o) in dst.iter_mut().enumerate() {
            *o = w[r * d..(r + 1) * d].iter().zip(src).map(|(a, b)| a * b).sum();
        }
    }
    out
}

fn check_compat(y: &LatentGrid, compat: &CompatMatrix) -> Result<()> {
    if compat.dim != y.channels() {
        return Err(Error::shape(format!(
            "compatibility matrix dim {} vs grid channels {}",
            compat.dim,
            y.channels()
        )));
    }
    Ok(())
}

/// `sum_{i<j} W^s_ij ||W(c) y_i - W(c) y_j||^2` with an explicit kernel and
/// compatibility matrix.
pub fn pairwise_energy_with(
    y: &LatentGrid,
    c: &TextCondition,
    kernel: &SpatialKernel,
    compat: &CompatMatrix,
) -> Result<f64> {
    check_compat(y, compat)?;
    let (h, w, d) = y.shape();
    check_window(kernel.size(), kernel.size(), h, w)?;
    let u = project_sites(y, &compat.matrix(c)?);
    // Offsets strictly after the center in row-major order visit each
    // unordered pair exactly once.
    let forward: Vec<_> = kernel
        .taps()
        .into_iter()
        .filter(|&(dr, dc, wt)| (dr > 0 || (dr == 0 && dc > 0)) && wt != 0.0)
        .collect();
    let mut total = 0.0;
    for r in 0..h as isize {
        for col in 0..w as isize {
            let ui = u.site(r as usize * w + col as usize);
            for &(dr, dc, wt) in &forward {
                let (rr, cc) = (r + dr, col + dc);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let uj = u.site(rr as usize * w + cc as usize);
                let sq: f64 = (0..d).map(|k| (ui[k] - uj[k]) * (ui[k] - uj[k])).sum();
                total += wt * sq;
            }
        }
    }
    Ok(total)
}

pub fn pairwise_energy(y: &LatentGrid, c: &TextCondition, params: &CrfParams) -> Result<f64> {
    pairwise_energy_with(y, c, &params.kernel, &params.compat_matrix)
}

/// `sum_k sum_m -log phi([J_m ⊛ y]_k)`.
pub fn higher_order_energy_with(y: &LatentGrid, filters: &FilterBank, eps: f64) -> Result<f64> {
    Ok(filter_responses(y, filters)?
        .iter()
        .map(|&r| neg_log_phi(r, eps))
        .sum())
}

pub fn higher_order_energy(y: &LatentGrid, params: &CrfParams) -> Result<f64> {
    higher_order_energy_with(y, &params.filters, params.eps_phi)
}

pub fn total_energy(
    y: &LatentGrid,
    x: &LatentGrid,
    c: &TextCondition,
    params: &CrfParams,
) -> Result<EnergyBreakdown> {
    let unary = unary_energy(y, x)?;
    let pairwise = pairwise_energy(y, c, params)?;
    let higher_order = higher_order_energy(y, params)?;
    Ok(EnergyBreakdown {
        unary,
        pairwise,
        higher_order,
        total: unary + pairwise + higher_order,
    })
}

/// Gradient of the unary plus pairwise energy.
pub fn quadratic_gradient(
    y: &LatentGrid,
    x: &LatentGrid,
    c: &TextCondition,
    kernel: &SpatialKernel,
    compat: &CompatMatrix,
) -> Result<LatentGrid> {
    y.check_same_shape(x, "energy gradient")?;
    check_compat(y, compat)?;
    let (h, w, d) = y.shape();
    let wm = compat.matrix(c)?;
    let u = project_sites(y, &wm);
    let msg = spatial_message_pass(&u, kernel)?;
    let sums = site_weight_sums(kernel, h, w);
    let mut grad = LatentGrid::zeros(h, w, d);
    let mut diff = vec![0.0; d];
    for i in 0..y.sites() {
        let (ui, mi) = (u.site(i), msg.site(i));
        for k in 0..d {
            diff[k] = sums[i] * ui[k] - mi[k];
        }
        let (yi, xi) = (y.site(i), x.site(i));
        let g = grad.site_mut(i);
        for col in 0..d {
            let wt_diff: f64 = (0..d).map(|r| wm[r * d + col] * diff[r]).sum();
            g[col] = 2.0 * (yi[col] - xi[col]) + 2.0 * wt_diff;
        }
    }
    Ok(grad)
}

/// `dE/dy = 2(y - x) + 2 sum_j W^s_ij A (y_i - y_j) - sum_m J_m⁻ ⊛ omega(J_m ⊛ y)`.
pub fn energy_gradient(
    y: &LatentGrid,
    x: &LatentGrid,
    c: &TextCondition,
    params: &CrfParams,
) -> Result<LatentGrid> {
    let mut grad = quadratic_gradient(y, x, c, &params.kernel, &params.compat_matrix)?;
    let q: Vec<f64> = filter_responses(y, &params.filters)?.into_iter().map(omega).collect();
    let ho = filter_adjoint(&q, &params.filters, y.height(), y.width());
    for (g, v) in grad.as_mut_slice().iter_mut().zip(ho.as_slice()) {
        *g -= v;
    }
    Ok(grad)
}
