//! Numerical self-checks of the CRF energy, inference and losses against
//! finite differences and exact solves.

use latentcrf::crf::energy::{energy_gradient, higher_order_energy, omega, phi, total_energy};
use latentcrf::crf::inference::quadratic_mean_field;
use latentcrf::crf::ops::{filter_responses, higher_order_term};
use latentcrf::crf::oracle::{coordinate_descent_oracle, quadratic_energy};
use latentcrf::crf::params::{CompatMatrix, CrfConfig, CrfParams, FilterBank, SpatialKernel, FILTER_BLOCK};
use latentcrf::crf::{backprop_crf, crf_infer_batch, Mode};
use latentcrf::params::ParamSet;
use latentcrf::report::RunReport;
use latentcrf::train::sce_loss;
use latentcrf::{LatentGrid, Result, TextCondition};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::GradcheckConfig;

/// Finite-difference probes closer than this to a kink of `-log phi` are
/// resampled.
const RESPONSE_MARGIN: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub cases: usize,
    /// Worst observed error, in the units of `tolerance`.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: &'static str, cases: usize, worst: f64, tolerance: f64) -> Self {
        Self {
            name,
            cases,
            worst,
            tolerance,
            passed: worst < tolerance,
        }
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn random_condition(rng: &mut ChaCha8Rng, dim: usize) -> TextCondition {
    TextCondition {
        class_id: 0,
        embedding: uniform_vec(rng, dim, -1.0, 1.0),
    }
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

/// Running maximum in which a NaN error counts as infinitely bad.
fn worse(worst: f64, err: f64) -> f64 {
    if err.is_nan() {
        f64::INFINITY
    } else {
        worst.max(err)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute error when both vanish.
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = l2(a).max(l2(b));
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

struct Instance {
    y: LatentGrid,
    x: LatentGrid,
    c: TextCondition,
    params: CrfParams,
}

/// A random instance with every energy term active and all filter
/// responses at least `RESPONSE_MARGIN` away from zero.
fn smooth_instance(rng: &mut ChaCha8Rng, max_side: usize, max_channels: usize) -> Result<Instance> {
    loop {
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
        let mut params = CrfParams::init(&cfg, rng)?;
        let n_half = params.kernel.half().len();
        params.kernel = SpatialKernel::from_half(kernel_size, uniform_vec(rng, n_half, 0.0, 0.5))?;
        let n = params.filters.coeffs().len();
        params.filters = FilterBank::from_coeffs(cfg.num_filters, 3, 3, d, 3.0, uniform_vec(rng, n, -1.0, 1.0))?;
        params.compat_matrix.base = uniform_vec(rng, d * d, -1.0, 1.0);
        params.compat_matrix.gen = uniform_vec(rng, 3 * d * d, -0.5, 0.5);
        let inst = Instance {
            y: LatentGrid::randn(h, w, d, rng),
            x: LatentGrid::randn(h, w, d, rng),
            c: random_condition(rng, 3),
            params,
        };
        let margin = filter_responses(&inst.y, &inst.params.filters)?
            .iter()
            .fold(f64::INFINITY, |m, r| m.min(r.abs()));
        if margin > RESPONSE_MARGIN {
            return Ok(inst);
        }
    }
}

fn regrid(like: &LatentGrid, v: &[f64]) -> Result<LatentGrid> {
    let (h, w, d) = like.shape();
    LatentGrid::from_vec(h, w, d, v.to_vec())
}

/// Analytic energy gradient against central differences of the total
/// energy.
pub fn energy_gradient_check(cfg: &GradcheckConfig, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.energy_instances {
        let inst = smooth_instance(&mut rng, cfg.max_side, cfg.max_channels)?;
        let analytic = energy_gradient(&inst.y, &inst.x, &inst.c, &inst.params)?;
        let numeric = central_difference(inst.y.as_slice(), 1e-4, |v| {
            regrid(&inst.y, v)
                .and_then(|y| total_energy(&y, &inst.x, &inst.c, &inst.params))
                .map_or(f64::NAN, |e| e.total)
        });
        worst = worse(worst, rel_l2(analytic.as_slice(), &numeric));
    }
    Ok(CheckOutcome::new("energy_gradient", cfg.energy_instances, worst, 1e-4))
}

/// Finite-difference gradient of the higher-order energy against
/// `-2 * higher_order_term`.
pub fn higher_order_adjoint_check(cfg: &GradcheckConfig, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.higher_order_instances {
        let inst = smooth_instance(&mut rng, cfg.max_side, cfg.max_channels)?;
        let term = higher_order_term(&inst.y, &inst.params.filters)?;
        let numeric = central_difference(inst.y.as_slice(), 1e-4, |v| {
            regrid(&inst.y, v)
                .and_then(|y| higher_order_energy(&y, &inst.params))
                .unwrap_or(f64::NAN)
        });
        let scaled: Vec<f64> = term.as_slice().iter().map(|t| -2.0 * t).collect();
        worst = worse(worst, rel_l2(&scaled, &numeric));
    }
    Ok(CheckOutcome::new("higher_order_adjoint", cfg.higher_order_instances, worst, 1e-4))
}

/// Numerical derivative of `ln phi` against `omega` (ReLU), away from 0.
pub fn phi_omega_check(cfg: &GradcheckConfig, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < cfg.phi_points {
        let y: f64 = rng.gen_range(-5.0..5.0);
        if y.abs() < 2.0 * h {
            continue;
        }
        let lp = |v: f64| phi(v, 1e-6).ln();
        let num = (lp(y + h) - lp(y - h)) / (2.0 * h);
        worst = worse(worst, (num - omega(y)).abs());
        checked += 1;
    }
    CheckOutcome::new("phi_omega_identity", cfg.phi_points, worst, 1e-4)
}

struct Quadratic {
    x: LatentGrid,
    c: TextCondition,
    kernel: SpatialKernel,
    compat: CompatMatrix,
}

fn random_quadratic(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> Quadratic {
    let kernel = SpatialKernel::from_half(3, uniform_vec(rng, 4, 0.0, 0.3)).expect("3x3 kernel has 4 free weights");
    let mut compat = CompatMatrix::identity(d, 2);
    for (b, n) in compat.base.iter_mut().zip(uniform_vec(rng, d * d, -0.3, 0.3)) {
        *b += n;
    }
    compat.gen = uniform_vec(rng, 2 * d * d, -0.2, 0.2);
    Quadratic {
        x: LatentGrid::randn(h, w, d, rng),
        c: random_condition(rng, 2),
        kernel,
        compat,
    }
}

/// Dense LU solve of the stationarity system of the quadratic energy,
/// `y_i + sum_j w_ij A (y_i - y_j) = x_i`, for all sites at once.
fn global_solution(q: &Quadratic) -> Result<LatentGrid> {
    let (h, w, d) = q.x.shape();
    let n = h * w;
    let a = q.compat.gram(&q.c)?;
    let mut m = DMatrix::<f64>::identity(n * d, n * d);
    for si in 0..n {
        for sj in (0..n).filter(|&sj| sj != si) {
            let (ri, ci) = ((si / w) as isize, (si % w) as isize);
            let (rj, cj) = ((sj / w) as isize, (sj % w) as isize);
            let wt = q.kernel.weight(rj - ri, cj - ci);
            if wt == 0.0 {
                continue;
            }
            for r in 0..d {
                for k in 0..d {
                    m[(si * d + r, si * d + k)] += wt * a[r * d + k];
                    m[(si * d + r, sj * d + k)] -= wt * a[r * d + k];
                }
            }
        }
    }
    let rhs = DVector::from_column_slice(q.x.as_slice());
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| latentcrf::Error::invalid("quadratic system is singular"))?;
    LatentGrid::from_vec(h, w, d, sol.iter().copied().collect())
}

/// Coordinate-descent traces must not increase; their end point and the
/// parallel exact-solve fixed point must reach the global minimum energy.
/// `worst` is the largest of the energy gaps and trace increases.
pub fn oracle_check(cfg: &GradcheckConfig, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.oracle_instances {
        let q = random_quadratic(&mut rng, 4, 4, 2);
        let out = coordinate_descent_oracle(&q.x, &q.c, &q.kernel, &q.compat, 40)?;
        let rise = out
            .energy_trace
            .windows(2)
            .map(|p| p[1] - p[0])
            .fold(0.0f64, f64::max);
        let star = global_solution(&q)?;
        let e_star = quadratic_energy(&star, &q.x, &q.c, &q.kernel, &q.compat)?;
        let e_cd = *out.energy_trace.last().expect("trace holds the initial energy");
        let fixed = quadratic_mean_field(&q.x, &q.c, &q.kernel, &q.compat, 400)?;
        let e_mf = quadratic_energy(&fixed, &q.x, &q.c, &q.kernel, &q.compat)?;
        for e in [rise, (e_cd - e_star).abs(), (e_mf - e_star).abs()] {
            worst = worse(worst, e);
        }
    }
    Ok(CheckOutcome::new("oracle_monotone_agreement", cfg.oracle_instances, worst, 1e-8))
}

struct BackpropProblem {
    params: CrfParams,
    xs: Vec<LatentGrid>,
    cs: Vec<TextCondition>,
    /// The loss is `sum_b <r_b, M(x_b)> + |M(x_b)|^2 / 4`.
    rs: Vec<LatentGrid>,
}

impl BackpropProblem {
    fn random(rng: &mut ChaCha8Rng, iterations: usize) -> Result<Self> {
        let d = 2;
        let cfg = CrfConfig {
            channels: d,
            cond_dim: 3,
            hidden: 4,
            kernel_size: 3,
            num_filters: 2,
            num_iterations: iterations,
            compat_init: 1.5,
            ..CrfConfig::default()
        };
        let mut params = CrfParams::init(&cfg, rng)?;
        for (bi, block) in params.params_mut().into_iter().enumerate() {
            for v in block.iter_mut() {
                *v = match bi {
                    0 => rng.gen_range(0.0..0.3),
                    10 => rng.gen_range(0.5..1.5),
                    _ => rng.gen_range(-1.0..1.0),
                };
            }
        }
        params.filters.enforce_constraints();
        Ok(Self {
            params,
            xs: (0..2).map(|_| LatentGrid::randn(4, 4, d, rng)).collect(),
            cs: (0..2).map(|_| random_condition(rng, 3)).collect(),
            rs: (0..2).map(|_| LatentGrid::randn(4, 4, d, rng)).collect(),
        })
    }

    fn loss(&self, params: &CrfParams) -> Result<f64> {
        let mut p = params.clone();
        let (out, _) = crf_infer_batch(&self.xs, &self.cs, &mut p, Mode::Train)?;
        Ok(out
            .iter()
            .zip(&self.rs)
            .map(|(o, r)| o.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b + 0.25 * a * a).sum::<f64>())
            .sum())
    }

    /// Parameter gradients and the tape's distance to the nearest kink.
    fn analytic(&self) -> Result<(Vec<Vec<f64>>, f64)> {
        let mut p = self.params.clone();
        let (out, tape) = crf_infer_batch(&self.xs, &self.cs, &mut p, Mode::Train)?;
        let tape = tape.ok_or(latentcrf::Error::TapeMissing)?;
        let g: Vec<LatentGrid> = out
            .iter()
            .zip(&self.rs)
            .map(|(o, r)| r.zip_map(o, |a, b| a + 0.5 * b))
            .collect();
        Ok((backprop_crf(&self.params, Some(&tape), &g)?.0, tape.min_kink_distance()))
    }
}

/// Unrolled-inference parameter gradients against central differences,
/// for each iteration count in `{1, 2}`. `worst` is the largest per-block
/// relative error.
pub fn backprop_check(cfg: &GradcheckConfig, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for iterations in [1, 2] {
        let mut accepted = 0;
        while accepted < cfg.backprop_problems {
            let prob = BackpropProblem::random(&mut rng, iterations)?;
            let (analytic, kink) = prob.analytic()?;
            if kink < 1e-3 {
                continue;
            }
            accepted += 1;
            cases += 1;
            for (bi, an) in analytic.iter().enumerate() {
                let base = prob.params.params()[bi].to_vec();
                let mut nu = central_difference(&base, 1e-6, |v| {
                    let mut p = prob.params.clone();
                    p.params_mut()[bi].copy_from_slice(v);
                    prob.loss(&p).unwrap_or(f64::NAN)
                });
                let mut an = an.clone();
                if bi == FILTER_BLOCK {
                    // Center coefficients are pinned at zero.
                    for (i, (a, n)) in an.iter_mut().zip(nu.iter_mut()).enumerate() {
                        if prob.params.filters.is_center(i) {
                            *a = 0.0;
                            *n = 0.0;
                        }
                    }
                }
                let scale = l2(&an).max(l2(&nu));
                let diff = an.iter().zip(&nu).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
                // Absolute slack of 1e-7 for blocks whose gradient vanishes.
                worst = worse(worst, diff / (scale + 1e-4));
            }
        }
    }
    Ok(CheckOutcome::new("backprop_finite_difference", cases, worst, 1e-3))
}

/// `sce_loss(0, t) = ln 2`, and on random logits
/// `exp(-sce(a, 1)) + exp(-sce(a, 0)) = 1`, `sce(a, 0) - sce(a, 1) = a`
/// and `sce(a, 1) = sce(-a, 0)`.
pub fn sce_check(cfg: &GradcheckConfig, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ln2 = std::f64::consts::LN_2;
    let mut worst = (sce_loss(0.0, 1.0) - ln2).abs().max((sce_loss(0.0, 0.0) - ln2).abs());
    for _ in 0..cfg.sce_points {
        let a: f64 = rng.gen_range(-20.0..20.0);
        let (l1, l0) = (sce_loss(a, 1.0), sce_loss(a, 0.0));
        let sum = (-l1).exp() + (-l0).exp();
        for e in [
            (sum - 1.0).abs(),
            ((l0 - l1) - a).abs() / a.abs().max(1.0),
            (l1 - sce_loss(-a, 0.0)).abs(),
        ] {
            worst = worse(worst, e);
        }
    }
    CheckOutcome::new("sce_identities", cfg.sce_points + 2, worst, 1e-12)
}

/// Every check, in a fixed order, each with its own derived seed.
pub fn run_all(cfg: &GradcheckConfig, seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        energy_gradient_check(cfg, seed)?,
        higher_order_adjoint_check(cfg, seed.wrapping_add(1))?,
        phi_omega_check(cfg, seed.wrapping_add(2)),
        oracle_check(cfg, seed.wrapping_add(3))?,
        backprop_check(cfg, seed.wrapping_add(4))?,
        sce_check(cfg, seed.wrapping_add(5)),
    ])
}

pub fn add_to_report(report: &mut RunReport, outcomes: &[CheckOutcome]) {
    for o in outcomes {
        report
            .note(format!("{}.cases", o.name), o.cases)
            .metric(format!("{}.worst", o.name), o.worst)
            .metric(format!("{}.tolerance", o.name), o.tolerance)
            .note(format!("{}.passed", o.name), o.passed);
    }
}
