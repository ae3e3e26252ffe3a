use latentcrf::metrics::{cosine_matrix, frechet_distance, frechet_from_features, vendi_score};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn one_dimensional_frechet_is_mean_and_deviation_gap() {
    for (m1, s1, m2, s2) in [(0.0, 1.0, 0.0, 1.0), (1.0, 2.0, -1.0, 0.5), (3.0, 0.1, 3.5, 4.0)] {
        let c1 = DMatrix::from_element(1, 1, s1 * s1);
        let c2 = DMatrix::from_element(1, 1, s2 * s2);
        let fd = frechet_distance(&[m1], &c1, &[m2], &c2).unwrap();
        let expect = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
        assert!((fd - expect).abs() < 1e-10, "{fd} vs {expect}");
    }
}

#[test]
fn diagonal_frechet_matches_closed_form() {
    let a = [0.5, 2.0, 1.0, 0.01];
    let b = [1.5, 0.2, 1.0, 3.0];
    let fd = frechet_distance(
        &[0.0; 4],
        &DMatrix::from_diagonal(&DVector::from_row_slice(&a)),
        &[1.0, 0.0, 0.0, 0.0],
        &DMatrix::from_diagonal(&DVector::from_row_slice(&b)),
    )
    .unwrap();
    let expect = 1.0 + a.iter().zip(&b).map(|(x, y): (&f64, &f64)| (x.sqrt() - y.sqrt()).powi(2)).sum::<f64>();
    assert!((fd - expect).abs() < 1e-10);
}

#[test]
fn vendi_of_orthogonal_blocks_counts_blocks() {
    for blocks in 1..=4 {
        let feats: Vec<Vec<f64>> = (0..12)
            .map(|i| (0..4).map(|j| if j == i % blocks { 2.0 } else { 0.0 }).collect())
            .collect();
        let v = vendi_score(&cosine_matrix(&feats)).unwrap();
        assert!((v - blocks as f64).abs() < 1e-9, "{blocks}: {v}");
    }
}

proptest! {
    #[test]
    fn vendi_is_permutation_and_duplication_aware(seed in 0u64..500, n in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = random_features(&mut rng, n, 5);
        let v = vendi_score(&cosine_matrix(&feats)).unwrap();
        prop_assert!(v >= 1.0 - 1e-9 && v <= n as f64 + 1e-9);
        let mut shuffled = feats.clone();
        shuffled.reverse();
        shuffled.rotate_left(seed as usize % n);
        let vs = vendi_score(&cosine_matrix(&shuffled)).unwrap();
        prop_assert!((v - vs).abs() < 1e-9);
        // Repeating every sample leaves the spectrum of K / n unchanged.
        let doubled: Vec<Vec<f64>> = feats.iter().chain(&feats).cloned().collect();
        let vd = vendi_score(&cosine_matrix(&doubled)).unwrap();
        prop_assert!((v - vd).abs() < 1e-8);
    }

    #[test]
    fn frechet_is_a_symmetric_nonnegative_discrepancy(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_features(&mut rng, 40, 4);
        let b: Vec<Vec<f64>> = random_features(&mut rng, 30, 4)
            .into_iter()
            .map(|f| f.iter().map(|x| 2.0 * x + 0.5).collect())
            .collect();
        let ab = frechet_from_features(&a, &b).unwrap();
        let ba = frechet_from_features(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab));
        prop_assert!(frechet_from_features(&a, &a).unwrap() < 1e-8);
    }
}
