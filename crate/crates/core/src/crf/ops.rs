//! Convolution-style primitives shared by the energy and the inference layer.
//!
//! All spatial operations use zero padding. Filter responses are
//! cross-correlations reducing the channel axis to one scalar per site and
//! filter; [`filter_adjoint`] is their exact transpose, which is the same as
//! correlating with the 180°-rotated filter.

use crate::crf::params::{FilterBank, SpatialKernel};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;

/// A `window` that cannot reach any other site of the grid is rejected.
pub fn check_window(window_h: usize, window_w: usize, height: usize, width: usize) -> Result<()> {
    let (rh, rw) = (window_h / 2, window_w / 2);
    let reach = rh.max(rw);
    if reach >= height && reach >= width {
        return Err(Error::WindowTooLarge {
            window: window_h.max(window_w),
            height,
            width,
        });
    }
    Ok(())
}

/// `out_i = sum_j W^s_ij y_j`, the same kernel on every channel.
pub fn spatial_message_pass(y: &LatentGrid, kernel: &SpatialKernel) -> Result<LatentGrid> {
    let (h, w, d) = y.shape();
    check_window(kernel.size(), kernel.size(), h, w)?;
    let taps: Vec<_> = kernel.taps().into_iter().filter(|t| t.2 != 0.0).collect();
    let mut out = LatentGrid::zeros(h, w, d);
    let src = y.as_slice();
    let dst = out.as_mut_slice();
    for r in 0..h as isize {
        for c in 0..w as isize {
            let i = (r as usize * w + c as usize) * d;
            for &(dr, dc, wt) in &taps {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let j = (rr as usize * w + cc as usize) * d;
                for ch in 0..d {
                    dst[i + ch] += wt * src[j + ch];
                }
            }
        }
    }
    Ok(out)
}

/// `sum_j W^s_ij` per site (smaller at the border under zero padding).
pub fn site_weight_sums(kernel: &SpatialKernel, height: usize, width: usize) -> Vec<f64> {
    let taps = kernel.taps();
    let mut out = vec![0.0; height * width];
    for r in 0..height as isize {
        for c in 0..width as isize {
            let mut s = 0.0;
            for &(dr, dc, wt) in &taps {
                let (rr, cc) = (r + dr, c + dc);
                if rr >= 0 && cc >= 0 && rr < height as isize && cc < width as isize {
                    s += wt;
                }
            }
            out[r as usize * width + c as usize] = s;
        }
    }
    out
}

/// Gradient of `<g, message_pass(y)>` with respect to the full kernel table.
pub fn kernel_table_gradient(y: &LatentGrid, g: &LatentGrid, size: usize) -> Vec<f64> {
    let (h, w, d) = y.shape();
    let r = (size / 2) as isize;
    let mut out = vec![0.0; size * size];
    let (ys, gs) = (y.as_slice(), g.as_slice());
    for dr in -r..=r {
        for dc in -r..=r {
            if dr == 0 && dc == 0 {
                continue;
            }
            let mut acc = 0.0;
            for row in 0..h as isize {
                let rr = row + dr;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for col in 0..w as isize {
                    let cc = col + dc;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    let i = (row as usize * w + col as usize) * d;
                    let j = (rr as usize * w + cc as usize) * d;
                    for ch in 0..d {
                        acc += gs[i + ch] * ys[j + ch];
                    }
                }
            }
            out[((dr + r) as usize) * size + (dc + r) as usize] = acc;
        }
    }
    out
}

/// Filter responses `[J_m ⊛ y]_k`, laid out as `site * count + m`.
pub fn filter_responses(y: &LatentGrid, filters: &FilterBank) -> Result<Vec<f64>> {
    let (h, w, d) = y.shape();
    if filters.channels() != d {
        return Err(Error::shape(format!(
            "filter channels {} vs grid channels {d}",
            filters.channels()
        )));
    }
    check_window(filters.height(), filters.width(), h, w)?;
    let m_count = filters.count();
    let (fh, fw) = (filters.height() as isize, filters.width() as isize);
    let (ca, cb) = (fh / 2, fw / 2);
    let coeffs = filters.coeffs();
    let src = y.as_slice();
    let mut out = vec![0.0; h * w * m_count];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let k = r as usize * w + c as usize;
            for m in 0..m_count {
                let mut acc = 0.0;
                for a in 0..fh {
                    let rr = r + a - ca;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for b in 0..fw {
                        let cc = c + b - cb;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        let j = (rr as usize * w + cc as usize) * d;
                        let f = filters.index(m, a as usize, b as usize, 0);
                        for ch in 0..d {
                            acc += coeffs[f + ch] * src[j + ch];
                        }
                    }
                }
                out[k * m_count + m] = acc;
            }
        }
    }
    Ok(out)
}

/// Transpose of [`filter_responses`]: broadcasts per-site scalars back to
/// `channels` through the filter coefficients, i.e. `sum_m J_m⁻ ⊛ q_m`.
pub fn filter_adjoint(q: &[f64], filters: &FilterBank, height: usize, width: usize) -> LatentGrid {
    let d = filters.channels();
    let m_count = filters.count();
    debug_assert_eq!(q.len(), height * width * m_count);
    let (fh, fw) = (filters.height() as isize, filters.width() as isize);
    let (ca, cb) = (fh / 2, fw / 2);
    let coeffs = filters.coeffs();
    let mut out = LatentGrid::zeros(height, width, d);
    let dst = out.as_mut_slice();
    for r in 0..height as isize {
        for c in 0..width as isize {
            let k = r as usize * width + c as usize;
            for m in 0..m_count {
                let qv = q[k * m_count + m];
                if qv == 0.0 {
                    continue;
                }
                for a in 0..fh {
                    let rr = r + a - ca;
                    if rr < 0 || rr >= height as isize {
                        continue;
                    }
                    for b in 0..fw {
                        let cc = c + b - cb;
                        if cc < 0 || cc >= width as isize {
                            continue;
                        }
                        let j = (rr as usize * width + cc as usize) * d;
                        let f = filters.index(m, a as usize, b as usize, 0);
                        for ch in 0..d {
                            dst[j + ch] += qv * coeffs[f + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of `<q, filter_responses(y)>` with respect to the coefficients.
pub fn filter_coeff_gradient(y: &LatentGrid, q: &[f64], filters: &FilterBank, grad: &mut [f64]) {
    let (h, w, d) = y.shape();
    let m_count = filters.count();
    let (fh, fw) = (filters.height() as isize, filters.width() as isize);
    let (ca, cb) = (fh / 2, fw / 2);
    let src = y.as_slice();
    for r in 0..h as isize {
        for c in 0..w as isize {
            let k = r as usize * w + c as usize;
            for m in 0..m_count {
                let qv = q[k * m_count + m];
                if qv == 0.0 {
                    continue;
                }
                for a in 0..fh {
                    let rr = r + a - ca;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for b in 0..fw {
                        let cc = c + b - cb;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        let j = (rr as usize * w + cc as usize) * d;
                        let f = filters.index(m, a as usize, b as usize, 0);
                        for ch in 0..d {
                            grad[f + ch] += qv * src[j + ch];
                        }
                    }
                }
            }
        }
    }
}

/// `xi_HO(y) = 1/2 sum_m J_m⁻ ⊛ omega(J_m ⊛ y)`.
pub fn higher_order_term(y: &LatentGrid, filters: &FilterBank) -> Result<LatentGrid> {
    let mut resp = filter_responses(y, filters)?;
    for v in resp.iter_mut() {
        *v = 0.5 * v.max(0.0);
    }
    Ok(filter_adjoint(&resp, filters, y.height(), y.width()))
}
