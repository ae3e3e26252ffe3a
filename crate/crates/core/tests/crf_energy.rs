mod common;

use common::*;
use latentcrf::crf::energy::{
    energy_gradient, higher_order_energy, neg_log_phi, omega, pairwise_energy, phi, total_energy,
    unary_energy,
};
use latentcrf::crf::ops::{higher_order_term, spatial_message_pass};
use latentcrf::crf::params::{CrfConfig, CrfParams, FilterBank};
use latentcrf::LatentGrid;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Responses this close to zero straddle the jump of `-log phi` under a
/// finite-difference probe and are resampled.
const RESPONSE_MARGIN: f64 = 1e-2;

fn smooth_instance(rng: &mut ChaCha8Rng, max_side: usize, max_channels: usize) -> Instance {
    loop {
        let inst = random_instance(rng, max_side, max_channels);
        if min_abs_response(&inst.y, &inst.params.filters) > RESPONSE_MARGIN {
            return inst;
        }
    }
}

#[test]
fn phi_at_two_matches_exponential() {
    let expected = 7.389_056_098_930_65_f64;
    assert!((phi(2.0, 1e-6) - expected).abs() < 1e-12);
    assert!(phi(-1.0, 1e-6) >= 1e-6);
}

#[test]
fn log_phi_derivative_is_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    let mut checked = 0;
    while checked < 1000 {
        let y: f64 = rng.gen_range(-5.0..5.0);
        if y.abs() < 2.0 * h {
            continue;
        }
        let lp = |v: f64| phi(v, 1e-6).ln();
        let num = (lp(y + h) - lp(y - h)) / (2.0 * h);
        assert!((num - omega(y)).abs() < 1e-4, "y = {y}: {num} vs {}", omega(y));
        checked += 1;
    }
}

#[test]
fn terms_match_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let inst = random_instance(&mut rng, 5, 3);
        let (u, p, ho) = energy_oracle(&inst.y, &inst.x, &inst.c, &inst.params);
        let e = total_energy(&inst.y, &inst.x, &inst.c, &inst.params).unwrap();
        assert!((e.unary - u).abs() <= 1e-10 * u.abs().max(1.0));
        assert!((e.pairwise - p).abs() <= 1e-10 * p.abs().max(1.0));
        assert!((e.higher_order - ho).abs() <= 1e-9 * ho.abs().max(1.0));
    }
}

#[test]
fn total_is_sum_of_independent_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let inst = random_instance(&mut rng, 6, 4);
        let e = total_energy(&inst.y, &inst.x, &inst.c, &inst.params).unwrap();
        let u = unary_energy(&inst.y, &inst.x).unwrap();
        let p = pairwise_energy(&inst.y, &inst.c, &inst.params).unwrap();
        let h = higher_order_energy(&inst.y, &inst.params).unwrap();
        assert_eq!(e.total.to_bits(), (u + p + h).to_bits());
    }
}

#[test]
fn degenerate_total_is_higher_order_constant() {
    let cfg = CrfConfig::default();
    let p = CrfParams::identity(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = LatentGrid::randn(4, 4, 4, &mut rng);
    let c = random_condition(&mut rng, 8);
    let e = total_energy(&x, &x, &c, &p).unwrap();
    let expected = 16.0 * 8.0 * -(1e-6f64).ln();
    assert!((e.total - expected).abs() < 1e-9);
}

#[test]
fn single_positive_response_contributes_negative_half_square() {
    // One filter picks the left neighbor of channel 0; a single grid entry
    // of 2 makes exactly one site respond with r = 2.
    let mut f = FilterBank::zeros(1, 3, 3, 1, 3.0).unwrap();
    let idx = f.index(0, 1, 0, 0);
    f.coeffs_mut()[idx] = 1.0;
    let mut y = LatentGrid::zeros(4, 4, 1);
    y.set(1, 1, 0, 2.0);
    let e = latentcrf::crf::energy::higher_order_energy_with(&y, &f, 1e-6).unwrap();
    let expected = -2.0 + 15.0 * -(1e-6f64).ln();
    assert!((e - expected).abs() < 1e-9);
    assert_eq!(neg_log_phi(2.0, 1e-6), -2.0);
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let inst = smooth_instance(&mut rng, 6, 4);
        let (h, w, d) = inst.y.shape();
        let analytic = energy_gradient(&inst.y, &inst.x, &inst.c, &inst.params).unwrap();
        let numeric = central_difference(inst.y.as_slice(), 1e-4, |v| {
            let y = LatentGrid::from_vec(h, w, d, v.to_vec()).unwrap();
            let (u, p, ho) = energy_oracle(&y, &inst.x, &inst.c, &inst.params);
            u + p + ho
        });
        let err = rel_l2(analytic.as_slice(), &numeric);
        worst = worst.max(err);
        assert!(err < 1e-4, "relative error {err}");
    }
    eprintln!("worst relative gradient error {worst:e}");
}

#[test]
fn higher_order_term_is_negative_half_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..50 {
        let inst = smooth_instance(&mut rng, 6, 4);
        let (h, w, d) = inst.y.shape();
        let term = higher_order_term(&inst.y, &inst.params.filters).unwrap();
        let numeric = central_difference(inst.y.as_slice(), 1e-4, |v| {
            let y = LatentGrid::from_vec(h, w, d, v.to_vec()).unwrap();
            energy_oracle(&y, &inst.x, &inst.c, &inst.params).2
        });
        let scaled: Vec<f64> = term.as_slice().iter().map(|t| -2.0 * t).collect();
        let err = rel_l2(&scaled, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn message_pass_is_linear_and_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let inst = random_instance(&mut rng, 6, 3);
        let a = inst.y.clone();
        let b = inst.x.clone();
        let k = &inst.params.kernel;
        let ma = spatial_message_pass(&a, k).unwrap();
        let mb = spatial_message_pass(&b, k).unwrap();
        // <K a, b> = <a, K b>
        let lhs: f64 = ma.as_slice().iter().zip(b.as_slice()).map(|(p, q)| p * q).sum();
        let rhs: f64 = a.as_slice().iter().zip(mb.as_slice()).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        let sum = spatial_message_pass(&a.add(&b.scaled(2.0)), k).unwrap();
        assert!(sum.max_abs_diff(&ma.add(&mb.scaled(2.0))) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn energy_terms_are_finite_and_unary_nonnegative(seed in any::<u64>(), scale in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inst = random_instance(&mut rng, 6, 4);
        inst.y = inst.y.scaled(scale);
        let e = total_energy(&inst.y, &inst.x, &inst.c, &inst.params).unwrap();
        prop_assert!(e.unary >= 0.0 && e.pairwise.is_finite() && e.higher_order.is_finite());
        let g = energy_gradient(&inst.y, &inst.x, &inst.c, &inst.params).unwrap();
        prop_assert!(g.is_finite());
        prop_assert_eq!(g.shape(), inst.y.shape());
    }

    #[test]
    fn nonnegative_kernel_gives_nonnegative_pairwise(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 6, 4);
        prop_assert!(pairwise_energy(&inst.y, &inst.c, &inst.params).unwrap() >= 0.0);
    }

    #[test]
    fn unary_zero_iff_equal(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 6, 4);
        prop_assert_eq!(unary_energy(&inst.x, &inst.x).unwrap(), 0.0);
        prop_assert!(unary_energy(&inst.y, &inst.x).unwrap() > 0.0);
    }
}
