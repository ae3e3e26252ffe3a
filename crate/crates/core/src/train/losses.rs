//! Scalar losses and their gradients.

use crate::crf::{crf_infer_batch, CrfParams, Mode};
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, TextCondition};

/// `sqrt(alpha) * z + sqrt(1 - alpha) * noise`.
pub fn corrupt_latent(z: &LatentGrid, alpha: f64, noise: &LatentGrid) -> Result<LatentGrid> {
    z.check_same_shape(noise, "corruption")?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("noise ratio {alpha} outside [0, 1]")));
    }
    let (a, b) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    Ok(z.zip_map(noise, |zv, nv| a * zv + b * nv))
}

/// Sigmoid cross-entropy of logit `a` against target `t`, in the
/// overflow-free form `max(a, 0) - a t + ln(1 + exp(-|a|))`.
pub fn sce_loss(a: f64, t: f64) -> f64 {
    a.max(0.0) - a * t + (-a.abs()).exp().ln_1p()
}

/// `d sce_loss / d a = sigmoid(a) - t`.
pub fn sce_grad(a: f64, t: f64) -> f64 {
    sigmoid(a) - t
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// `||target - pred||_2` and its gradient with respect to `pred`
/// (zero at the minimum).
pub fn l2_distance_grad(pred: &LatentGrid, target: &LatentGrid) -> (f64, LatentGrid) {
    let diff = pred.sub(target);
    let n = diff.norm();
    let g = if n > 0.0 { diff.scaled(1.0 / n) } else { LatentGrid::zeros(pred.height(), pred.width(), pred.channels()) };
    (n, g)
}

/// Training-mode output of `M` for a single sample, leaving `params` untouched.
fn crf_train_output(x: &LatentGrid, c: &TextCondition, params: &CrfParams) -> Result<LatentGrid> {
    let mut p = params.clone();
    let (mut ys, _) = crf_infer_batch(std::slice::from_ref(x), std::slice::from_ref(c), &mut p, Mode::Train)?;
    Ok(ys.remove(0))
}

/// `||z - M(z_tilde)||_2` with `M` in training mode.
pub fn denoising_loss(z: &LatentGrid, z_tilde: &LatentGrid, c: &TextCondition, params: &CrfParams) -> Result<f64> {
    z.check_same_shape(z_tilde, "denoising loss")?;
    Ok(z.distance(&crf_train_output(z_tilde, c, params)?))
}

/// `||z_f - M(z_s)||_2` with `M` in training mode.
pub fn distillation_loss(z_s: &LatentGrid, z_f: &LatentGrid, c: &TextCondition, params: &CrfParams) -> Result<f64> {
    z_s.check_same_shape(z_f, "distillation loss")?;
    Ok(z_f.distance(&crf_train_output(z_s, c, params)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sce_at_zero_is_ln2() {
        assert!((sce_loss(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((sce_loss(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn sce_is_stable_for_large_logits() {
        assert!(sce_loss(800.0, 1.0).is_finite());
        assert!((sce_loss(-800.0, 1.0) - 800.0).abs() < 1e-9);
        assert!(sce_loss(800.0, 1.0) >= 0.0);
    }

    #[test]
    fn sce_grad_matches_difference_quotient() {
        for &a in &[-3.0, -0.2, 0.7, 4.0] {
            for &t in &[0.0, 1.0] {
                let h = 1e-6;
                let num = (sce_loss(a + h, t) - sce_loss(a - h, t)) / (2.0 * h);
                assert!((num - sce_grad(a, t)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn corruption_endpoints() {
        let z = LatentGrid::from_vec(1, 2, 1, vec![0.5, -2.0]).unwrap();
        let n = LatentGrid::from_vec(1, 2, 1, vec![1.5, 0.25]).unwrap();
        assert_eq!(corrupt_latent(&z, 1.0, &n).unwrap(), z);
        assert_eq!(corrupt_latent(&z, 0.0, &n).unwrap(), n);
        assert!(corrupt_latent(&z, 1.1, &n).is_err());
    }

    #[test]
    fn l2_gradient_at_minimum_is_zero() {
        let z = LatentGrid::filled(2, 2, 1, 0.3);
        let (n, g) = l2_distance_grad(&z, &z);
        assert_eq!(n, 0.0);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }
}
