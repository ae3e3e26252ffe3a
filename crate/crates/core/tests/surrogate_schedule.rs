use latentcrf::surrogate::schedule::{cfg_combine, cosine_alpha_bar, ddim_update, make_schedule};
use latentcrf::LatentGrid;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Unclipped cosine ratio `f(t + 1) / f(0)`.
fn cosine_ratio(t: usize, t_train: usize) -> f64 {
    let f = |u: f64| {
        let x = (u / t_train as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    f((t + 1) as f64) / f(0.0)
}

#[test]
fn table_matches_closed_form_away_from_the_clip() {
    let table = cosine_alpha_bar(1000);
    for (t, &ab) in table.iter().enumerate().take(980) {
        assert!((ab - cosine_ratio(t, 1000)).abs() < 1e-12, "t = {t}");
    }
    assert!((table[200] - 0.8978).abs() < 5e-5, "alpha_bar(200) = {}", table[200]);
}

#[test]
fn exact_noise_ddim_recovers_the_trajectory() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = LatentGrid::randn(4, 5, 3, &mut rng);
    let eps = LatentGrid::randn(4, 5, 3, &mut rng);
    let s = make_schedule(1000, 50).unwrap();
    let on_path = |ab: f64| x0.zip_map(&eps, |x, e| ab.sqrt() * x + (1.0 - ab).sqrt() * e);
    let mut z = on_path(s.alpha_bar(s.steps()[49]).unwrap());
    for i in 0..50 {
        let (t, tp) = s.step_pair(i).unwrap();
        let (ab, abp) = (s.alpha_bar(t).unwrap(), s.alpha_bar_or_clean(tp).unwrap());
        z = ddim_update(&z, &eps, ab, abp).unwrap();
        let expect = on_path(abp);
        let gap = z.as_slice().iter().zip(expect.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-9, "step {i}: {gap}");
    }
}

proptest! {
    #[test]
    fn ddim_steps_compose(seed in 0u64..1000, a in 0.05f64..0.95, b in 0.0f64..1.0, c in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = LatentGrid::randn(3, 3, 2, &mut rng);
        let eps = LatentGrid::randn(3, 3, 2, &mut rng);
        let mid = a + (1.0 - a) * b;
        let end = mid + (1.0 - mid) * c;
        let two = ddim_update(&ddim_update(&z, &eps, a, mid).unwrap(), &eps, mid, end).unwrap();
        let one = ddim_update(&z, &eps, a, end).unwrap();
        for (x, y) in two.as_slice().iter().zip(one.as_slice()) {
            prop_assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn guidance_is_affine_in_scale(seed in 0u64..1000, g in -3.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ec = LatentGrid::randn(2, 3, 2, &mut rng);
        let eu = LatentGrid::randn(2, 3, 2, &mut rng);
        let out = cfg_combine(&ec, &eu, g).unwrap();
        for ((o, c), u) in out.as_slice().iter().zip(ec.as_slice()).zip(eu.as_slice()) {
            prop_assert!((o - ((1.0 - g) * u + g * c)).abs() < 1e-12);
        }
    }
}
