use nalgebra::{DVector, SymmetricEigen};

use super::{EqConstrainedQP, SolveReport};
use crate::error::{Error, Result};
use crate::linalg::{machine_rank_tol, null_space, pinv_solve, RANK_TOL};

/// Solve an equality-constrained QP by null-space reduction.
///
/// The particular solution is the minimum-norm solution of `A_eq x = b_eq`,
/// which is orthogonal to the null space of `A_eq`; the reduced problem is then
/// solved with a pseudo-inverse of the reduced Hessian. Together this yields the
/// minimum-Euclidean-norm minimizer whenever the minimizer is not unique.
///
/// Infeasibility is declared when the normwise backward error of the
/// least-squares solution exceeds `tol`, i.e. when
/// `||A x_p - b|| > tol * (||A|| ||x_p|| + ||b||)`.
pub fn solve_eq_qp(qp: &EqConstrainedQP, tol: f64) -> Result<SolveReport> {
    qp.validate()?;
    let h = qp.hessian.to_dense();
    let a = &qp.a_eq;
    let b = &qp.b_eq;

    let a_tol = machine_rank_tol(a.nrows(), a.ncols());
    let (xp, _) = pinv_solve(a, b, a_tol);
    let feas = (a * &xp - b).norm();
    if feas > super::feasibility_bound(a, &xp, b, tol) {
        return Err(Error::Infeasible { residual: feas });
    }

    let basis = null_space(a, a_tol);
    let mut x = xp.clone();
    if basis.ncols() > 0 {
        let hr = basis.tr_mul(&(&h * &basis));
        let hr = (&hr + hr.transpose()) * 0.5;
        let grad = basis.tr_mul(&(&h * &xp + &qp.linear));
        let eig = SymmetricEigen::new(hr);
        let lam_max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let lam_min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if lam_min < -tol * lam_max.max(1.0) {
            return Err(Error::Unbounded { curvature: lam_min });
        }
        let flat = RANK_TOL * lam_max;
        let slope_tol = tol.sqrt() * (1.0 + grad.norm());
        let mut y = DVector::zeros(basis.ncols());
        for (k, &lam) in eig.eigenvalues.iter().enumerate() {
            let q = eig.eigenvectors.column(k);
            let c = q.dot(&grad);
            if lam > flat && lam > 0.0 {
                y.axpy(-c / lam, &q, 1.0);
            } else if c.abs() > slope_tol {
                // Linear descent along a direction of zero curvature.
                return Err(Error::Unbounded { curvature: lam });
            }
        }
        x += &basis * y;
    }

    let grad_full = &h * &x + &qp.linear;
    let (nu, _) = if a.nrows() > 0 {
        pinv_solve(&a.transpose(), &(-&grad_full), a_tol)
    } else {
        (DVector::zeros(0), 0)
    };
    let stationarity = if a.nrows() > 0 {
        (&grad_full + a.tr_mul(&nu)).norm()
    } else {
        grad_full.norm()
    };
    let primal_residual = if a.nrows() > 0 { (a * &x - b).norm() } else { 0.0 };

    Ok(SolveReport {
        objective: qp.objective(&x),
        x,
        primal_residual,
        dual_residual: stationarity,
        multipliers: Some(nu),
        iterations: 0,
        converged: true,
    })
}
