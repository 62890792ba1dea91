use std::time::Instant;

use proptest::prelude::*;
use protopinv::data::{pca_fit, PcaBasis};
use protopinv::tensor::{condition_number, ridge_pinv_apply, ridge_pinv_svd, singular_values, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Largest entrywise gap, relative to the larger solution's magnitude when
/// that exceeds one.
fn scaled_gap(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.sub(b).max_abs() / a.max_abs().max(b.max_abs()).max(1.0)
}

#[test]
fn cholesky_and_svd_routes_agree_on_random_instances() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = rng.random_range(1..=64);
        let n = rng.random_range(1..=64);
        let k = rng.random_range(1..=8);
        let lambda = 10f64.powf(rng.random_range(-6.0..2.0));
        let a = random(m, n, &mut rng);
        let b = random(m, k, &mut rng);
        let chol = ridge_pinv_apply(&a, lambda, &b).unwrap();
        let svd = ridge_pinv_svd(&a, lambda, &b).unwrap();
        worst = worst.max(scaled_gap(&chol, &svd));
    }
    assert!(worst < 1e-8, "worst gap {worst:e}");
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn ridge_solution_is_stationary() {
    // (AᵀA + λI)W − AᵀB = 0
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(40, 25, &mut rng);
    let b = random(40, 3, &mut rng);
    let w = ridge_pinv_apply(&a, 0.05, &b).unwrap();
    let residual = a.matmul_tn(&a.matmul(&w)).add(&w.scale(0.05)).sub(&a.matmul_tn(&b));
    assert!(residual.max_abs() < 1e-12);
}

#[test]
fn condition_number_matches_singular_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(12, 5, &mut rng);
    let s = singular_values(&a).unwrap();
    let expected = s[0] / s[s.len() - 1];
    assert!((condition_number(&a) - expected).abs() < 1e-12 * expected);
    assert!(condition_number(&a) >= 1.0);
}

#[test]
fn rank_deficient_matrix_has_infinite_condition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(6, 3, &mut rng);
    let dup = a.vstack(&a.row_range(0, 1));
    let mut wide = Matrix::zeros(7, 4);
    for r in 0..7 {
        wide.row_mut(r)[..3].copy_from_slice(dup.row(r));
        wide[(r, 3)] = dup[(r, 0)];
    }
    assert_eq!(condition_number(&wide), f64::INFINITY);
}

fn random_basis(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> PcaBasis {
    // orthonormal columns from a PCA fit of random data
    let x = random(d_in * 3, d_in, rng);
    let fitted = pca_fit(&x, d_out).unwrap();
    let mean = (0..d_in).map(|_| rng.random_range(-2.0..2.0)).collect();
    PcaBasis::from_parts(mean, fitted.components().clone()).unwrap()
}

#[test]
fn back_projected_weights_reproduce_reduced_space_outputs() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let basis = random_basis(30, 7, &mut rng);
        let w_z = random(8, 11, &mut rng);
        let w_x = basis.back_project_w1(&w_z).unwrap();
        let x = random(20, 30, &mut rng).scale(3.0);
        let z = basis.project(&x).unwrap();
        let via_z = z.with_bias_column().matmul(&w_z);
        let via_x = x.with_bias_column().matmul(&w_x);
        worst = worst.max(via_z.sub(&via_x).max_abs());
    }
    assert!(worst < 1e-10, "{worst:e}");
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn projection_then_reconstruction_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let basis = random_basis(10, 4, &mut rng);
    let x = random(6, 10, &mut rng);
    let once = basis.reconstruct(&basis.project(&x).unwrap()).unwrap();
    let twice = basis.reconstruct(&basis.project(&once).unwrap()).unwrap();
    assert!(once.sub(&twice).max_abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn condition_number_is_scale_invariant(
        rows in 2usize..10,
        cols in 1usize..6,
        log_scale in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(rows.max(cols), cols, &mut rng);
        let k = condition_number(&a);
        let ks = condition_number(&a.scale(10f64.powf(log_scale)));
        prop_assume!(k.is_finite() && k < 1e8);
        prop_assert!((k - ks).abs() <= 1e-8 * k, "{} vs {}", k, ks);
    }

    #[test]
    fn ridge_routes_agree(
        rows in 1usize..20,
        cols in 1usize..20,
        log_lambda in -6.0f64..2.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(rows, cols, &mut rng);
        let b = random(rows, 2, &mut rng);
        let lambda = 10f64.powf(log_lambda);
        let gap = scaled_gap(&ridge_pinv_apply(&a, lambda, &b).unwrap(), &ridge_pinv_svd(&a, lambda, &b).unwrap());
        prop_assert!(gap < 1e-8, "gap {}", gap);
    }

    #[test]
    fn back_projection_identity_holds_for_random_bases(
        d_in in 2usize..16,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_out = rng.random_range(1..=d_in);
        let basis = random_basis(d_in, d_out, &mut rng);
        let w_z = random(d_out + 1, 3, &mut rng);
        let w_x = basis.back_project_w1(&w_z).unwrap();
        let x = random(4, d_in, &mut rng);
        let gap = basis.project(&x).unwrap().with_bias_column().matmul(&w_z)
            .sub(&x.with_bias_column().matmul(&w_x)).max_abs();
        prop_assert!(gap < 1e-10, "gap {}", gap);
    }
}
