mod common;

use common::*;
use latentcrf::crf::inference::quadratic_mean_field;
use latentcrf::crf::oracle::{coordinate_descent_oracle, quadratic_energy};
use latentcrf::crf::params::{CompatMatrix, SpatialKernel};
use latentcrf::{LatentGrid, TextCondition};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Quadratic {
    x: LatentGrid,
    c: TextCondition,
    kernel: SpatialKernel,
    compat: CompatMatrix,
}

fn random_quadratic(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> Quadratic {
    let kernel = SpatialKernel::from_half(3, uniform_vec(rng, 4, 0.0, 0.3)).unwrap();
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

/// Dense solve of the stationarity system
/// `y_i + sum_j w_ij A (y_i - y_j) = x_i` for all sites at once.
fn global_solution(q: &Quadratic) -> LatentGrid {
    let (h, w, d) = q.x.shape();
    let n = h * w;
    let wm = compat_oracle(&q.compat, &q.c);
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = (0..d).map(|k| wm[k * d + i] * wm[k * d + j]).sum();
        }
    }
    let mut m = DMatrix::<f64>::identity(n * d, n * d);
    for si in 0..n {
        for sj in 0..n {
            if si == sj {
                continue;
            }
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
    let sol = m.lu().solve(&rhs).unwrap();
    LatentGrid::from_vec(h, w, d, sol.iter().copied().collect()).unwrap()
}

#[test]
fn trace_is_monotone_and_reaches_global_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let q = random_quadratic(&mut rng, 4, 4, 2);
        let out = coordinate_descent_oracle(&q.x, &q.c, &q.kernel, &q.compat, 20).unwrap();
        for pair in out.energy_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-10, "{} -> {}", pair[0], pair[1]);
        }
        let star = global_solution(&q);
        let e_star = quadratic_energy(&star, &q.x, &q.c, &q.kernel, &q.compat).unwrap();
        let e_final = *out.energy_trace.last().unwrap();
        assert!((e_final - e_star).abs() < 1e-8, "{e_final} vs {e_star}");
    }
}

#[test]
fn parallel_exact_solve_matches_sequential_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..10 {
        let q = random_quadratic(&mut rng, 4, 5, 2);
        let seq = coordinate_descent_oracle(&q.x, &q.c, &q.kernel, &q.compat, 200).unwrap();
        let par = quadratic_mean_field(&q.x, &q.c, &q.kernel, &q.compat, 400).unwrap();
        assert!(seq.y.max_abs_diff(&par) < 1e-6, "{}", seq.y.max_abs_diff(&par));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn energy_never_increases(seed in any::<u64>(), h in 1usize..5, w in 2usize..5, d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_quadratic(&mut rng, h, w, d);
        let out = coordinate_descent_oracle(&q.x, &q.c, &q.kernel, &q.compat, 3).unwrap();
        for pair in out.energy_trace.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-10);
        }
        prop_assert!(out.y.is_finite());
    }
}
