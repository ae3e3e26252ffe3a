//! Exact sequential coordinate descent on the quadratic energy.
//!
//! Each site is minimized in closed form while its neighbors are held fixed:
//! `y_i <- K_i^{-1} (x_i + A sum_j W^s_ij y_j)` with `A = W(c)^T W(c)` and
//! `K_i = I + A sum_j W^s_ij`. The higher-order term is not included.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::crf::energy::{pairwise_energy_with, unary_energy};
use crate::crf::ops::{check_window, site_weight_sums};
use crate::crf::params::{CompatMatrix, SpatialKernel};
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, TextCondition};

/// Factorized per-site system `K_i`.
pub struct SiteSolver {
    chol: Cholesky<f64, Dyn>,
}

impl SiteSolver {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.chol
            .solve(&DVector::from_column_slice(rhs))
            .iter()
            .copied()
            .collect()
    }
}

/// One Cholesky factorization per site; fails if any `K_i` is not positive
/// definite.
pub fn site_solvers(
    x: &LatentGrid,
    c: &TextCondition,
    kernel: &SpatialKernel,
    compat: &CompatMatrix,
) -> Result<Vec<SiteSolver>> {
    let (h, w, d) = x.shape();
    if compat.dim != d {
        return Err(Error::shape("compatibility matrix vs grid channels"));
    }
    check_window(kernel.size(), kernel.size(), h, w)?;
    let a = DMatrix::from_row_slice(d, d, &compat.gram(c)?);
    site_weight_sums(kernel, h, w)
        .into_iter()
        .enumerate()
        .map(|(site, s)| {
            let k = DMatrix::<f64>::identity(d, d) + &a * s;
            Cholesky::new(k)
                .map(|chol| SiteSolver { chol })
                .ok_or(Error::SingularSystem { site })
        })
        .collect()
}

/// Quadratic (unary plus pairwise) energy.
pub fn quadratic_energy(
    y: &LatentGrid,
    x: &LatentGrid,
    c: &TextCondition,
    kernel: &SpatialKernel,
    compat: &CompatMatrix,
) -> Result<f64> {
    Ok(unary_energy(y, x)? + pairwise_energy_with(y, c, kernel, compat)?)
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub y: LatentGrid,
    /// Energy after initialization followed by one value per site update.
    pub energy_trace: Vec<f64>,
}

/// `sweeps` passes of sequential exact site minimization in row-major order,
/// starting from `y = x`.
pub fn coordinate_descent_oracle(
    x: &LatentGrid,
    c: &TextCondition,
    kernel: &SpatialKernel,
    compat: &CompatMatrix,
    sweeps: usize,
) -> Result<OracleResult> {
    if sweeps == 0 {
        return Err(Error::invalid("sweeps must be positive"));
    }
    let (h, w, d) = x.shape();
    let solvers = site_solvers(x, c, kernel, compat)?;
    let a = compat.gram(c)?;
    let taps: Vec<_> = kernel.taps().into_iter().filter(|t| t.2 != 0.0).collect();
    let mut y = x.clone();
    let mut trace = vec![quadratic_energy(&y, x, c, kernel, compat)?];
    trace.reserve(sweeps * x.sites());
    let mut neigh = vec![0.0; d];
    let mut rhs = vec![0.0; d];
    for _ in 0..sweeps {
        for r in 0..h as isize {
            for col in 0..w as isize {
                let i = r as usize * w + col as usize;
                neigh.iter_mut().for_each(|v| *v = 0.0);
                for &(dr, dc, wt) in &taps {
                    let (rr, cc) = (r + dr, col + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    for (n, v) in neigh.iter_mut().zip(y.site(rr as usize * w + cc as usize)) {
                        *n += wt * v;
                    }
                }
                let xi = x.site(i);
                for k in 0..d {
                    rhs[k] = xi[k] + (0..d).map(|j| a[k * d + j] * neigh[j]).sum::<f64>();
                }
                y.site_mut(i).copy_from_slice(&solvers[i].solve(&rhs));
                trace.push(quadratic_energy(&y, x, c, kernel, compat)?);
            }
        }
    }
    Ok(OracleResult { y, energy_trace: trace })
}
