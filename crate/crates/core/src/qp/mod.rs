//! Quadratic programs used by every controller.
//!
//! All problems share the objective convention `1/2 x^T H x + f^T x`.
//! [`solve_eq_qp`] handles equality constraints directly through a
//! rank-revealing null-space reduction and returns the minimum-norm minimizer
//! when the optimum is not unique. [`solve_l1_slack_qp`] adds an l1 penalty on
//! one variable block and a quadratic penalty on a slack block, and is solved
//! by ADMM with a soft-thresholded consensus copy of the l1 block.

mod admm;
mod eq;

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub use admm::{solve_l1_slack_qp, AdmmSettings, AdmmState, L1SlackSolver};
pub use eq::solve_eq_qp;

/// Default tolerance for direct solves.
pub const DIRECT_TOL: f64 = 1e-9;
/// Default tolerance for the iterative l1 solver.
pub const ITERATIVE_TOL: f64 = 1e-7;
/// Default iteration cap for the iterative l1 solver.
pub const ITERATIVE_MAX_ITER: usize = 5000;

/// `tol * (||A|| ||x|| + ||b||)`, the residual allowed for a backward-stable
/// solution of `A x = b`.
pub(crate) fn feasibility_bound(a: &DMatrix<f64>, x: &DVector<f64>, b: &DVector<f64>, tol: f64) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    tol * (crate::linalg::spectral_norm(a) * x.norm() + b.norm())
}

/// Objective Hessian, either dense or as a Gram product `H = F^T F`.
///
/// The Gram form keeps the DDPC Hessians (rank bounded by the number of
/// Hankel rows, dimension equal to the number of columns) cheap to factor.
#[derive(Debug, Clone, PartialEq)]
pub enum Hessian {
    Dense(DMatrix<f64>),
    Gram(DMatrix<f64>),
}

impl Hessian {
    pub fn dim(&self) -> usize {
        match self {
            Hessian::Dense(h) => h.ncols(),
            Hessian::Gram(f) => f.ncols(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Hessian::Dense(h) => h.clone(),
            Hessian::Gram(f) => f.tr_mul(f),
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Hessian::Dense(h) => h * x,
            Hessian::Gram(f) => f.tr_mul(&(f * x)),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Hessian::Dense(h) => {
                if !h.is_square() {
                    return Err(Error::dim("hessian columns", h.nrows(), h.ncols()));
                }
                if !crate::linalg::is_symmetric(h, 1e-9) {
                    return Err(Error::InvalidInput("hessian is not symmetric".into()));
                }
            }
            Hessian::Gram(_) => {}
        }
        let m = match self {
            Hessian::Dense(h) => h,
            Hessian::Gram(f) => f,
        };
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite hessian".into()));
        }
        Ok(())
    }
}

/// `min 1/2 x^T H x + f^T x  s.t.  A_eq x = b_eq`.
#[derive(Debug, Clone, PartialEq)]
pub struct EqConstrainedQP {
    pub hessian: Hessian,
    pub linear: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
}

impl EqConstrainedQP {
    pub fn new(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
    ) -> Result<Self> {
        let qp = Self {
            hessian: Hessian::Dense(hessian),
            linear,
            a_eq,
            b_eq,
        };
        qp.validate()?;
        Ok(qp)
    }

    /// Problem without equality constraints.
    pub fn unconstrained(hessian: DMatrix<f64>, linear: DVector<f64>) -> Result<Self> {
        let n = linear.len();
        Self::new(hessian, linear, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * self.hessian.apply(x).dot(x) + self.linear.dot(x)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let n = self.linear.len();
        self.hessian.validate()?;
        if self.hessian.dim() != n {
            return Err(Error::dim("hessian dimension", n, self.hessian.dim()));
        }
        if self.a_eq.ncols() != n {
            return Err(Error::dim("constraint columns", n, self.a_eq.ncols()));
        }
        if self.a_eq.nrows() != self.b_eq.len() {
            return Err(Error::dim("constraint rows", self.a_eq.nrows(), self.b_eq.len()));
        }
        let finite = self.linear.iter().all(|v| v.is_finite())
            && self.a_eq.iter().all(|v| v.is_finite())
            && self.b_eq.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("non-finite QP data".into()));
        }
        Ok(())
    }
}

/// Equality-constrained QP plus `l1_weight * ||x[l1_block]||_1` and
/// `slack_weight * ||x[slack_block]||_2^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct L1SlackQP {
    pub core: EqConstrainedQP,
    pub l1_weight: f64,
    pub l1_block: Range<usize>,
    pub slack_weight: f64,
    pub slack_block: Range<usize>,
}

impl L1SlackQP {
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        let l1: f64 = self.l1_block.clone().map(|i| x[i].abs()).sum();
        let slack: f64 = self.slack_block.clone().map(|i| x[i] * x[i]).sum();
        self.core.objective(x) + self.l1_weight * l1 + self.slack_weight * slack
    }

    pub(crate) fn validate(&self) -> Result<()> {
        self.core.validate()?;
        if !(self.l1_weight >= 0.0) || !(self.slack_weight >= 0.0) {
            return Err(Error::InvalidInput(
                "l1 and slack weights must be nonnegative".into(),
            ));
        }
        let n = self.core.dim();
        for (name, b) in [("l1", &self.l1_block), ("slack", &self.slack_block)] {
            if b.start > b.end || b.end > n {
                return Err(Error::InvalidInput(format!(
                    "{name} block {b:?} outside 0..{n}"
                )));
            }
        }
        let (a, b) = (&self.l1_block, &self.slack_block);
        if a.start < b.end && b.start < a.end {
            return Err(Error::InvalidInput("l1 and slack blocks overlap".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub x: DVector<f64>,
    pub objective: f64,
    /// `||A_eq x - b_eq||`.
    pub primal_residual: f64,
    /// Stationarity residual for direct solves, ADMM dual residual otherwise.
    pub dual_residual: f64,
    /// Equality multipliers (direct solves only).
    pub multipliers: Option<DVector<f64>>,
    pub iterations: usize,
    pub converged: bool,
}
