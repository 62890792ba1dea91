use super::{gemm, LinalgError, MatMut, MatRef, Matrix, Scalar};

/// Column-block width of the right-looking factorization.
const BLOCK: usize = 96;

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = G`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdFactorization<T> {
    factor: Matrix<T>,
}

impl<T: Scalar> SpdFactorization<T> {
    pub fn n(&self) -> usize {
        self.factor.rows()
    }

    pub fn factor(&self) -> &Matrix<T> {
        &self.factor
    }

    /// `L·Lᵀ`
    pub fn reconstruct(&self) -> Matrix<T> {
        self.factor.matmul_nt(&self.factor)
    }

    pub fn solve(&self, b: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
        solve_spd(self, b)
    }
}

/// Factors a symmetric positive-definite matrix.
///
/// The input is symmetrised as `(G + Gᵀ)/2` before factoring; asymmetry
/// above `1e-6·‖G‖_F` is rejected as corrupted input.
pub fn cholesky_factor<T: Scalar>(g: &Matrix<T>) -> Result<SpdFactorization<T>, LinalgError> {
    let n = g.rows();
    if g.cols() != n {
        return Err(LinalgError::ShapeMismatch {
            op: "cholesky_factor",
            lhs: g.shape(),
            rhs: (n, n),
        });
    }
    let tolerance = 1e-6 * g.frobenius_norm().as_f64();
    let asymmetry = g.asymmetry().as_f64();
    if asymmetry > tolerance {
        return Err(LinalgError::NotSymmetric { asymmetry, tolerance });
    }

    let half = T::from_f64(0.5);
    let mut a = Matrix::zeros(n, n);
    {
        let src = g.as_slice();
        let dst = a.as_mut_slice();
        for i in 0..n {
            for j in 0..=i {
                dst[i * n + j] = (src[i * n + j] + src[j * n + i]) * half;
            }
        }
    }

    let mut panel: Vec<T> = Vec::new();
    for kb in (0..n).step_by(BLOCK) {
        let ke = (kb + BLOCK).min(n);
        let nb = ke - kb;
        let data = a.as_mut_slice();

        // Diagonal block.
        for j in kb..ke {
            let mut s = data[j * n + j];
            for p in kb..j {
                let l = data[j * n + p];
                s = s - l * l;
            }
            if !(s > T::zero()) || !s.is_finite() {
                return Err(LinalgError::NotPositiveDefinite {
                    pivot: j,
                    value: s.as_f64(),
                });
            }
            let d = s.sqrt();
            data[j * n + j] = d;
            for i in (j + 1)..ke {
                let mut s = data[i * n + j];
                for p in kb..j {
                    s = s - data[i * n + p] * data[j * n + p];
                }
                data[i * n + j] = s / d;
            }
        }

        if ke == n {
            break;
        }

        // Panel below the diagonal block: L21 = A21 · L11⁻ᵀ, row by row as
        // axpys against the transposed diagonal block.
        let mut l11t = vec![T::zero(); nb * nb];
        for j in 0..nb {
            for p in 0..=j {
                l11t[p * nb + j] = data[(kb + j) * n + kb + p];
            }
        }
        for i in ke..n {
            let row = &mut data[i * n + kb..i * n + ke];
            for j in 0..nb {
                let x = row[j] / l11t[j * nb + j];
                row[j] = x;
                let col = &l11t[j * nb + j + 1..(j + 1) * nb];
                row[j + 1..].iter_mut().zip(col).for_each(|(r, &l)| *r = *r - x * l);
            }
        }

        // Trailing update A22 ← A22 − L21·L21ᵀ, lower block-triangle only.
        let m = n - ke;
        panel.clear();
        panel.reserve(m * nb);
        for i in ke..n {
            panel.extend_from_slice(&data[i * n + kb..i * n + ke]);
        }
        let p = MatRef::new(&panel, m, nb, nb as isize, 1);
        for r0 in (0..m).step_by(BLOCK) {
            let r1 = (r0 + BLOCK).min(m);
            let c = a.view_mut().block_mut(ke + r0, ke, r1 - r0, r1);
            gemm(
                -T::one(),
                p.block(r0, 0, r1 - r0, nb),
                p.block(0, 0, r1, nb).t(),
                T::one(),
                c,
            );
        }
    }

    let data = a.as_mut_slice();
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = T::zero();
        }
    }
    Ok(SpdFactorization { factor: a })
}

/// Solves `G·X = B` given the Cholesky factor of `G`.
pub fn solve_spd<T: Scalar>(fac: &SpdFactorization<T>, b: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
    let n = fac.n();
    if b.rows() != n {
        return Err(LinalgError::ShapeMismatch {
            op: "solve_spd",
            lhs: (n, n),
            rhs: b.shape(),
        });
    }
    let r = b.cols();
    let mut x = b.clone();
    if n == 0 || r == 0 {
        return Ok(x);
    }
    let l = fac.factor.as_slice();
    let lv = MatRef::new(l, n, n, n as isize, 1);
    let xs = x.as_mut_slice();

    // L·Y = B, one diagonal block at a time; rows below are updated by gemm
    for kb in (0..n).step_by(BLOCK) {
        let ke = (kb + BLOCK).min(n);
        forward_block(l, n, xs, r, kb, ke);
        if ke < n {
            let (done, rest) = xs.split_at_mut(ke * r);
            let solved = MatRef::new(&done[kb * r..], ke - kb, r, r as isize, 1);
            gemm(
                -T::one(),
                lv.block(ke, kb, n - ke, ke - kb),
                solved,
                T::one(),
                MatMut::new(rest, n - ke, r, r as isize),
            );
        }
    }

    // Lᵀ·X = Y from the bottom block up
    let last = (n - 1) / BLOCK * BLOCK;
    for kb in (0..=last).rev().step_by(BLOCK) {
        let ke = (kb + BLOCK).min(n);
        if ke < n {
            let (head, tail) = xs.split_at_mut(ke * r);
            let solved = MatRef::new(tail, n - ke, r, r as isize, 1);
            gemm(
                -T::one(),
                lv.block(ke, kb, n - ke, ke - kb).t(),
                solved,
                T::one(),
                MatMut::new(&mut head[kb * r..], ke - kb, r, r as isize),
            );
        }
        backward_block(l, n, xs, r, kb, ke);
    }
    Ok(x)
}

/// Substitution inside the diagonal block `kb..ke` of `L·Y = B`.
fn forward_block<T: Scalar>(l: &[T], n: usize, xs: &mut [T], r: usize, kb: usize, ke: usize) {
    for i in kb..ke {
        let (done, rest) = xs.split_at_mut(i * r);
        let xi = &mut rest[..r];
        for p in kb..i {
            let lip = l[i * n + p];
            if lip != T::zero() {
                let xp = &done[p * r..(p + 1) * r];
                xi.iter_mut().zip(xp).for_each(|(a, &b)| *a = *a - lip * b);
            }
        }
        let d = l[i * n + i];
        xi.iter_mut().for_each(|a| *a = *a / d);
    }
}

/// Substitution inside the diagonal block `kb..ke` of `Lᵀ·X = Y`.
fn backward_block<T: Scalar>(l: &[T], n: usize, xs: &mut [T], r: usize, kb: usize, ke: usize) {
    for i in (kb..ke).rev() {
        let (head, tail) = xs.split_at_mut((i + 1) * r);
        let xi = &mut head[i * r..];
        for p in (i + 1)..ke {
            let lpi = l[p * n + i];
            if lpi != T::zero() {
                let xp = &tail[(p - i - 1) * r..(p - i) * r];
                xi.iter_mut().zip(xp).for_each(|(a, &b)| *a = *a - lpi * b);
            }
        }
        let d = l[i * n + i];
        xi.iter_mut().for_each(|a| *a = *a / d);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rel_err(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
        a.sub(b).frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn identity_factor_is_identity() {
        let fac = cholesky_factor(&Matrix::<f64>::identity(3)).unwrap();
        assert_eq!(fac.factor(), &Matrix::identity(3));
    }

    #[test]
    fn diagonal_factor_is_elementwise_sqrt() {
        let g = Matrix::<f64>::diag(&[4.0, 9.0]);
        let fac = cholesky_factor(&g).unwrap();
        assert_eq!(fac.factor(), &Matrix::diag(&[2.0, 3.0]));
    }

    #[test]
    fn gram_plus_identity_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(5, 3, &mut rng);
        let g = a.matmul_tn(&a).add(&Matrix::identity(3));
        let fac = cholesky_factor(&g).unwrap();
        assert!(fac.reconstruct().sub(&g).frobenius_norm() < 1e-12);
    }

    #[test]
    fn blocked_path_reconstructs_large_matrix() {
        // n spans several column blocks plus a ragged tail
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 2 * BLOCK + 37;
        let a = random(n + 10, n, &mut rng);
        let g = a.matmul_tn(&a).add(&Matrix::identity(n));
        let fac = cholesky_factor(&g).unwrap();
        assert!(rel_err(&fac.reconstruct(), &g) < 1e-12);
        let l = fac.factor();
        for i in 0..n {
            assert!(l[(i, i)] > 0.0);
            for j in (i + 1)..n {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn single_precision_meets_its_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(40, 20, &mut rng);
        let g = a.matmul_tn(&a).add(&Matrix::identity(20)).cast::<f32>();
        let fac = cholesky_factor(&g).unwrap();
        let err = fac.reconstruct().sub(&g).frobenius_norm() / g.frobenius_norm();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let g = Matrix::<f64>::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
        assert!(matches!(
            cholesky_factor(&g),
            Err(LinalgError::NotPositiveDefinite { pivot: 1, .. })
        ));
    }

    #[test]
    fn nan_input_is_rejected_not_propagated() {
        let mut g = Matrix::<f64>::identity(3);
        g[(2, 2)] = f64::NAN;
        assert!(cholesky_factor(&g).is_err());
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let g = Matrix::<f64>::from_rows(&[&[2.0, 1.0], &[0.0, 2.0]]);
        assert!(matches!(cholesky_factor(&g), Err(LinalgError::NotSymmetric { .. })));
    }

    #[test]
    fn solve_identity_and_scaled_identity() {
        let b = Matrix::<f64>::from_rows(&[&[1.0, -2.0], &[3.0, 0.5], &[7.0, 1.0]]);
        let fac = cholesky_factor(&Matrix::identity(3)).unwrap();
        assert_eq!(solve_spd(&fac, &b).unwrap(), b);

        let fac = cholesky_factor(&Matrix::<f64>::identity(3).scale(2.0)).unwrap();
        let x = solve_spd(&fac, &Matrix::identity(3)).unwrap();
        assert!(x.sub(&Matrix::<f64>::identity(3).scale(0.5)).max_abs() <= 4.0 * f64::EPSILON);
    }

    /// Gauss-Jordan inverse with partial pivoting; independent of the Cholesky path.
    fn dense_inverse(g: &Matrix<f64>) -> Matrix<f64> {
        let n = g.rows();
        let mut aug = Matrix::<f64>::zeros(n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = g[(i, j)];
            }
            aug[(i, n + i)] = 1.0;
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&a, &b| aug[(a, col)].abs().total_cmp(&aug[(b, col)].abs()))
                .unwrap();
            for j in 0..2 * n {
                let tmp = aug[(col, j)];
                aug[(col, j)] = aug[(piv, j)];
                aug[(piv, j)] = tmp;
            }
            let d = aug[(col, col)];
            for j in 0..2 * n {
                aug[(col, j)] /= d;
            }
            for i in 0..n {
                if i != col {
                    let f = aug[(i, col)];
                    for j in 0..2 * n {
                        aug[(i, j)] -= f * aug[(col, j)];
                    }
                }
            }
        }
        aug.columns(n, 2 * n)
    }

    #[test]
    fn solve_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(9, 6, &mut rng);
        let g = a.matmul_tn(&a).add(&Matrix::identity(6).scale(0.5));
        let b = random(6, 2, &mut rng);
        let x = solve_spd(&cholesky_factor(&g).unwrap(), &b).unwrap();
        let oracle = dense_inverse(&g).matmul(&b);
        assert!(x.sub(&oracle).max_abs() < 1e-10);
        let residual = g.matmul(&x).sub(&b).frobenius_norm() / b.frobenius_norm();
        assert!(residual < 1e-10);
    }

    #[test]
    fn blocked_solve_spans_several_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 2 * BLOCK + 37;
        let a = random(n + 3, n, &mut rng);
        let g = a.matmul_tn(&a).add(&Matrix::identity(n));
        let b = random(n, 7, &mut rng);
        let x = solve_spd(&cholesky_factor(&g).unwrap(), &b).unwrap();
        let residual = g.matmul(&x).sub(&b).frobenius_norm() / b.frobenius_norm();
        assert!(residual < 1e-10, "{residual}");
    }

    #[test]
    fn solve_rejects_wrong_row_count() {
        let fac = cholesky_factor(&Matrix::<f64>::identity(3)).unwrap();
        assert!(matches!(
            solve_spd(&fac, &Matrix::zeros(2, 1)),
            Err(LinalgError::ShapeMismatch { .. })
        ));
    }
}
