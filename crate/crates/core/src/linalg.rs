//! Dense helpers shared by the solvers and diagnostics.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

/// Default relative rank threshold: singular values below `RANK_TOL * sigma_max`
/// are treated as zero.
pub const RANK_TOL: f64 = 1e-10;

/// Machine-precision rank threshold `max(m, n) * eps` for an `m x n` matrix.
pub fn machine_rank_tol(m: usize, n: usize) -> f64 {
    m.max(n).max(1) as f64 * f64::EPSILON
}

/// Thin SVD `a = U diag(s) V^T` with `U: m x k`, `V: n x k`, `k = min(m, n)`.
///
/// Computed by faer: the nalgebra 0.35 SVD loses accuracy on exactly
/// rank-deficient input, which is the normal case for noiseless Hankel data.
pub fn thin_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return (DMatrix::zeros(m, 0), DVector::zeros(0), DMatrix::zeros(n, 0));
    }
    let fa = faer::Mat::<f64>::from_fn(m, n, |i, j| a[(i, j)]);
    let svd = fa.thin_svd().expect("SVD of a finite matrix");
    let (fu, fs, fv) = (svd.U(), svd.S().column_vector(), svd.V());
    (
        DMatrix::from_fn(m, k, |i, j| fu[(i, j)]),
        DVector::from_fn(k, |i, _| fs[i]),
        DMatrix::from_fn(n, k, |i, j| fv[(i, j)]),
    )
}

/// Singular values only.
pub fn singular_values(a: &DMatrix<f64>) -> DVector<f64> {
    thin_svd(a).1
}

/// Minimum-norm least-squares solution of `a x = b` and the numerical rank of `a`
/// at the relative threshold `rank_tol`.
pub fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>, rank_tol: f64) -> (DVector<f64>, usize) {
    let n = a.ncols();
    if a.nrows() == 0 || n == 0 {
        return (DVector::zeros(n), 0);
    }
    let (u, s, v) = thin_svd(a);
    let cutoff = rank_tol * s.max();
    let mut x = DVector::zeros(n);
    let mut rank = 0;
    for (k, &sk) in s.iter().enumerate() {
        if sk > cutoff && sk > 0.0 {
            rank += 1;
            let coeff = u.column(k).dot(b) / sk;
            x.axpy(coeff, &v.column(k), 1.0);
        }
    }
    (x, rank)
}

/// Numerical rank at a relative threshold.
pub fn rank(a: &DMatrix<f64>, rank_tol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let s = singular_values(a);
    let cutoff = rank_tol * s.max();
    s.iter().filter(|&&v| v > cutoff && v > 0.0).count()
}

/// Orthonormal basis (as columns) of the null space of `a`.
pub fn null_space(a: &DMatrix<f64>, rank_tol: f64) -> DMatrix<f64> {
    let n = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    // The thin SVD of a wide matrix drops the null directions, so pad to square.
    let padded = if a.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let (_, s, v) = thin_svd(&padded);
    let cutoff = rank_tol * s.max();
    let keep: Vec<usize> = (0..s.len())
        .filter(|&k| !(s[k] > cutoff && s[k] > 0.0))
        .collect();
    let mut basis = DMatrix::zeros(n, keep.len());
    for (j, &k) in keep.iter().enumerate() {
        basis.set_column(j, &v.column(k));
    }
    basis
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    singular_values(a).max()
}

pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<Complex<f64>> {
    if a.is_empty() {
        return Vec::new();
    }
    a.clone().complex_eigenvalues().iter().copied().collect()
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    eigenvalues(a)
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Eigenvalues of the symmetric part of `a`, ascending.
pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    if a.is_empty() {
        return Vec::new();
    }
    let sym = (a + a.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = 1.0 + a.amax();
    (a - a.transpose()).amax() <= tol * scale
}

/// `v^T m v`.
pub fn quad_form(v: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (m * v).dot(v)
}

/// Inverse of a symmetric positive-definite matrix, falling back to LU when
/// Cholesky fails. `None` when the matrix is singular.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Some(ch.inverse());
    }
    m.clone().try_inverse()
}

/// Stack vectors end to end.
pub fn concat(parts: &[DVector<f64>]) -> DVector<f64> {
    let n: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(n);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.len()).copy_from(p);
        at += p.len();
    }
    out
}

/// Block-diagonal matrix with `reps` copies of `block`.
pub fn block_diag_repeat(block: &DMatrix<f64>, reps: usize) -> DMatrix<f64> {
    let (r, c) = block.shape();
    let mut out = DMatrix::zeros(r * reps, c * reps);
    for k in 0..reps {
        out.view_mut((k * r, k * c), (r, c)).copy_from(block);
    }
    out
}

/// Ordinary least-squares line fit `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Standard error of the slope; zero for exact fits and for two points.
    pub slope_stderr: f64,
    pub n: usize,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Option<LineFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_stderr = if n > 2 {
        (sse / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Some(LineFit {
        slope,
        intercept,
        r2,
        slope_stderr,
        n,
    })
}

/// Condition number `sigma_max / sigma_min` of a complex square matrix.
pub(crate) fn complex_condition(m: &DMatrix<Complex<f64>>) -> f64 {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return 1.0;
    }
    let fm = faer::Mat::<faer::c64>::from_fn(r, c, |i, j| faer::c64::new(m[(i, j)].re, m[(i, j)].im));
    let s = match fm.singular_values() {
        Ok(s) => s,
        Err(_) => return f64::INFINITY,
    };
    let smin = s.iter().copied().fold(f64::INFINITY, f64::min);
    let smax = s.iter().copied().fold(0.0, f64::max);
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn pinv_identity() {
        let (x, r) = pinv_solve(&DMatrix::identity(2, 2), &DVector::from_vec(vec![1.0, 2.0]), RANK_TOL);
        assert_eq!(r, 2);
        assert_relative_eq!(x, DVector::from_vec(vec![1.0, 2.0]), epsilon = 1e-14);
    }

    #[test]
    fn pinv_single_equation_is_min_norm() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let (x, r) = pinv_solve(&a, &DVector::from_vec(vec![2.0]), RANK_TOL);
        assert_eq!(r, 1);
        assert_relative_eq!(x, DVector::from_vec(vec![1.0, 1.0]), epsilon = 1e-14);
    }

    #[test]
    fn pinv_zero_matrix() {
        let (x, r) = pinv_solve(&DMatrix::zeros(2, 2), &DVector::zeros(2), RANK_TOL);
        assert_eq!(r, 0);
        assert_eq!(x, DVector::zeros(2));
    }

    #[test]
    fn null_space_of_wide_matrix() {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
        let n = null_space(&a, RANK_TOL);
        assert_eq!(n.ncols(), 2);
        assert!((&a * &n).amax() < 1e-14);
        assert_relative_eq!(n.transpose() * &n, DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn svd_reconstructs_rank_deficient_input() {
        let mut a = DMatrix::from_row_slice(
            4,
            3,
            &[1.38, 0.96, 0.0, 0.008, 1.87, 0.0, 1.31, -0.83, 0.0, 0.0, -1.11, 0.0],
        );
        let c0 = a.column(0).clone_owned();
        a.set_column(2, &c0);
        let (u, s, v) = thin_svd(&a);
        let back = &u * DMatrix::from_diagonal(&s) * v.transpose();
        assert!((back - &a).amax() < 1e-13);
        assert_eq!(rank(&a, RANK_TOL), 2);
    }

    #[test]
    fn exact_exponential_fit() {
        let xs: Vec<f64> = (1..=6).map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| -x).collect();
        let f = fit_line(&xs, &ys).unwrap();
        assert_relative_eq!(f.slope, -1.0, epsilon = 1e-12);
        assert_relative_eq!(f.r2, 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn pinv_residual_is_minimal(
            vals in proptest::collection::vec(-3.0f64..3.0, 12),
            rhs in proptest::collection::vec(-3.0f64..3.0, 4),
            dirs in proptest::collection::vec(-1.0f64..1.0, 300),
        ) {
            // 4x3 with the last column a copy of the first: rank deficient.
            let mut a = DMatrix::from_row_slice(4, 3, &vals);
            let c0 = a.column(0).clone_owned();
            a.set_column(2, &c0);
            let b = DVector::from_vec(rhs);
            let (x, _) = pinv_solve(&a, &b, RANK_TOL);
            let best = (&a * &x - &b).norm();
            for k in 0..100 {
                let d = DVector::from_row_slice(&dirs[3 * k..3 * k + 3]) * 1e-3;
                let r = (&a * (&x + d) - &b).norm();
                prop_assert!(r >= best - 1e-12);
            }
        }
    }
}
