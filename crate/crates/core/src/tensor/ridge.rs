use nalgebra::DMatrix;

use super::{cholesky_factor, gemm, solve_spd, LinalgError, Matrix, Scalar, SpdFactorization};

const SVD_MAX_ITERATIONS: usize = 10_000;

/// `W = (AᵀA + λI)⁻¹AᵀB` via Cholesky.
pub fn ridge_pinv_apply<T: Scalar>(a: &Matrix<T>, lambda: T, b: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
    ridge_pinv_factored(a, lambda, b).map(|(w, _)| w)
}

/// Same as [`ridge_pinv_apply`] but also hands back the factorization of
/// `AᵀA + λI`, so a caller can reuse it for adjoint solves.
pub fn ridge_pinv_factored<T: Scalar>(
    a: &Matrix<T>,
    lambda: T,
    b: &Matrix<T>,
) -> Result<(Matrix<T>, SpdFactorization<T>), LinalgError> {
    if a.rows() != b.rows() {
        return Err(LinalgError::ShapeMismatch {
            op: "ridge_pinv",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    if !(lambda > T::zero()) || !lambda.is_finite() {
        return Err(LinalgError::InvalidLambda(lambda.as_f64()));
    }
    let n = a.cols();
    let mut g = Matrix::zeros(n, n);
    gemm(T::one(), a.t(), a.view(), T::zero(), g.view_mut());
    for i in 0..n {
        g[(i, i)] = g[(i, i)] + lambda;
    }
    let fac = cholesky_factor(&g)?;
    let r = a.matmul_tn(b);
    let w = solve_spd(&fac, &r)?;
    Ok((w, fac))
}

/// Cholesky ridge solve that falls back to the SVD route when the normal
/// matrix is numerically indefinite. The flag reports whether it did.
pub fn ridge_pinv_or_svd<T: Scalar>(a: &Matrix<T>, lambda: T, b: &Matrix<T>) -> Result<(Matrix<T>, bool), LinalgError> {
    match ridge_pinv_apply(a, lambda, b) {
        Ok(w) => Ok((w, false)),
        Err(LinalgError::NotPositiveDefinite { .. }) => ridge_pinv_svd(a, lambda, b).map(|w| (w, true)),
        Err(e) => Err(e),
    }
}

fn to_dmatrix<T: Scalar>(m: &Matrix<T>) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |r, c| m[(r, c)].as_f64())
}

/// Ridge solution through the SVD `A = UΣVᵀ`: `W = V·diag(σ/(σ²+λ))·UᵀB`.
///
/// Computed in double precision regardless of `T`. At `λ = 0` this is the
/// Moore–Penrose solution `A⁺B`, with singular values below
/// `max(m,n)·ε·σ_max` treated as zero.
pub fn ridge_pinv_svd<T: Scalar>(a: &Matrix<T>, lambda: T, b: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
    if a.rows() != b.rows() {
        return Err(LinalgError::ShapeMismatch {
            op: "ridge_pinv_svd",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let lambda = lambda.as_f64();
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(LinalgError::InvalidLambda(lambda));
    }
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Ok(Matrix::zeros(n, b.cols()));
    }
    let svd = DMatrix::try_svd(to_dmatrix(a), true, true, f64::EPSILON, SVD_MAX_ITERATIONS)
        .ok_or(LinalgError::SvdNoConvergence)?;
    let u = svd.u.as_ref().ok_or(LinalgError::SvdNoConvergence)?;
    let v_t = svd.v_t.as_ref().ok_or(LinalgError::SvdNoConvergence)?;
    let sigma = &svd.singular_values;
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    let cutoff = m.max(n) as f64 * f64::EPSILON * sigma_max;

    let mut ut_b = u.transpose() * to_dmatrix(b);
    for (i, &s) in sigma.iter().enumerate() {
        let gain = if lambda > 0.0 {
            s / (s * s + lambda)
        } else if s > cutoff {
            1.0 / s
        } else {
            0.0
        };
        ut_b.row_mut(i).scale_mut(gain);
    }
    let w = v_t.transpose() * ut_b;
    Ok(Matrix::from_fn(n, b.cols(), |r, c| T::from_f64(w[(r, c)])))
}

/// Singular values in descending order, computed in double precision.
pub fn singular_values<T: Scalar>(a: &Matrix<T>) -> Result<Vec<f64>, LinalgError> {
    if a.is_empty() {
        return Ok(Vec::new());
    }
    let svd = DMatrix::try_svd(to_dmatrix(a), false, false, f64::EPSILON, SVD_MAX_ITERATIONS)
        .ok_or(LinalgError::SvdNoConvergence)?;
    let mut s: Vec<f64> = svd.singular_values.iter().cloned().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// `σ_max(A)/σ_min(A)`, or `+∞` when `σ_min ≤ max(m,n)·ε·σ_max` (ε of the
/// storage precision), when `A` is zero, or when the SVD fails.
pub fn condition_number<T: Scalar>(a: &Matrix<T>) -> f64 {
    let s = match singular_values(a) {
        Ok(s) if !s.is_empty() => s,
        _ => return f64::INFINITY,
    };
    let max = s[0];
    let min = *s.last().unwrap();
    let eps = T::epsilon().as_f64();
    let cutoff = a.rows().max(a.cols()) as f64 * eps * max;
    if !(max > 0.0) || !(min > cutoff) {
        return f64::INFINITY;
    }
    max / min
}
