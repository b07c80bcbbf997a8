use std::collections::HashMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{solve_eq_qp, EqConstrainedQP, Hessian, L1SlackQP, SolveReport, DIRECT_TOL};
use crate::error::{Error, Result};
use crate::linalg::{null_space, thin_svd, RANK_TOL};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmSettings {
    /// Initial penalty parameter.
    pub rho: f64,
    /// Over-relaxation factor in (0, 2).
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Iterations between residual-balancing checks.
    pub balance_every: usize,
    /// Normalized residual ratio that triggers a penalty change.
    pub balance_ratio: f64,
    pub balance_factor: f64,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            rho: 1.0,
            alpha: 1.6,
            tol: super::ITERATIVE_TOL,
            max_iter: super::ITERATIVE_MAX_ITER,
            balance_every: 5,
            balance_ratio: 10.0,
            balance_factor: 2.0,
        }
    }
}

/// Consensus copy, scaled dual and penalty carried between solves.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub y: DVector<f64>,
    pub u: DVector<f64>,
    pub rho: f64,
}

enum Kernel {
    /// No active l1 term: a single direct solve. For a Gram Hessian without
    /// slack, `ls` holds `null(A)` and `pinv(F null(A))` so that Gram-form
    /// solves run as a constrained least-squares problem.
    Direct {
        h: DMatrix<f64>,
        ls: Option<(DMatrix<f64>, DMatrix<f64>)>,
    },
    /// Gram Hessian with the l1 block covering every variable. With
    /// `F = U S V^T`, `(F^T F + rho I)^{-1} = V diag(1/(s^2+rho)) V^T + P / rho`
    /// where `P` projects onto the complement of `range(V)`, so a penalty
    /// change never refactors `F`.
    Spectral {
        v: DMatrix<f64>,
        s: DVector<f64>,
        ut: DMatrix<f64>,
        av: DMatrix<f64>,
        /// `P A^T`.
        ap: DMatrix<f64>,
    },
    /// Anything else: null-space reduction of the dense x-update.
    Dense {
        h: DMatrix<f64>,
        null: DMatrix<f64>,
    },
}

enum Factor {
    Spectral {
        inv: DVector<f64>,
        y: DMatrix<f64>,
        s_inv: DMatrix<f64>,
    },
    Dense {
        m: DMatrix<f64>,
        reduced: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    },
}

/// ADMM solver for a fixed [`L1SlackQP`] structure whose linear term and
/// constraint right-hand side may change between solves.
///
/// Factorizations are cached per penalty value, so repeated solves (one per
/// control step) only pay for the iterations.
pub struct L1SlackSolver {
    hessian: Hessian,
    a_eq: DMatrix<f64>,
    a_pinv: DMatrix<f64>,
    a_norm: f64,
    l1_weight: f64,
    l1_block: Range<usize>,
    slack_weight: f64,
    slack_block: Range<usize>,
    settings: AdmmSettings,
    kernel: Kernel,
    cache: HashMap<u64, Factor>,
}

fn soft(v: f64, k: f64) -> f64 {
    if v > k {
        v - k
    } else if v < -k {
        v + k
    } else {
        0.0
    }
}

fn pinv_matrix(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return DMatrix::zeros(n, m);
    }
    let (u, s, v) = thin_svd(a);
    let cutoff = RANK_TOL * s.max();
    let inv = s.map(|x| if x > cutoff && x > 0.0 { 1.0 / x } else { 0.0 });
    v * DMatrix::from_diagonal(&inv) * u.transpose()
}

fn sym_inverse(s: &DMatrix<f64>) -> DMatrix<f64> {
    if s.nrows() == 0 {
        return DMatrix::zeros(0, 0);
    }
    let s = (s + s.transpose()) * 0.5;
    if let Some(ch) = s.clone().cholesky() {
        return ch.inverse();
    }
    let eig = SymmetricEigen::new(s);
    let cutoff = RANK_TOL * eig.eigenvalues.amax();
    let inv = eig
        .eigenvalues
        .map(|l| if l.abs() > cutoff && l != 0.0 { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

impl L1SlackSolver {
    pub fn new(qp: &L1SlackQP, settings: AdmmSettings) -> Result<Self> {
        qp.validate()?;
        if !(settings.rho > 0.0) || !(settings.tol > 0.0) || !(settings.alpha > 0.0 && settings.alpha < 2.0) {
            return Err(Error::InvalidInput("ADMM settings out of range".into()));
        }
        let n = qp.core.dim();
        let a = qp.core.a_eq.clone();
        let a_pinv = pinv_matrix(&a);

        let dense_h = || {
            let mut h = qp.core.hessian.to_dense();
            for i in qp.slack_block.clone() {
                h[(i, i)] += 2.0 * qp.slack_weight;
            }
            h
        };

        let kernel = if qp.l1_block.is_empty() || qp.l1_weight == 0.0 {
            let ls = match &qp.core.hessian {
                Hessian::Gram(f) if qp.slack_block.is_empty() || qp.slack_weight == 0.0 => {
                    let null = null_space(&a, RANK_TOL);
                    let fn_pinv = pinv_matrix(&(f * &null));
                    Some((null, fn_pinv))
                }
                _ => None,
            };
            Kernel::Direct { h: dense_h(), ls }
        } else {
            match &qp.core.hessian {
                Hessian::Gram(f) if qp.slack_block.is_empty() && qp.l1_block == (0..n) => {
                    let (ut, s, v) = if f.nrows() == 0 {
                        (DMatrix::zeros(0, 0), DVector::zeros(0), DMatrix::zeros(n, 0))
                    } else {
                        let (u, s, v) = thin_svd(f);
                        (u.transpose(), s, v)
                    };
                    let av = &a * &v;
                    let ap = a.transpose() - &v * av.transpose();
                    Kernel::Spectral { v, s, ut, av, ap }
                }
                _ => Kernel::Dense {
                    h: dense_h(),
                    null: null_space(&a, RANK_TOL),
                },
            }
        };

        Ok(Self {
            hessian: qp.core.hessian.clone(),
            a_norm: crate::linalg::spectral_norm(&a),
            a_eq: a,
            a_pinv,
            l1_weight: qp.l1_weight,
            l1_block: qp.l1_block.clone(),
            slack_weight: qp.slack_weight,
            slack_block: qp.slack_block.clone(),
            settings,
            kernel,
            cache: HashMap::new(),
        })
    }

    pub fn settings(&self) -> &AdmmSettings {
        &self.settings
    }

    pub fn dim(&self) -> usize {
        self.a_eq.ncols()
    }

    fn ensure_factor(&mut self, rho: f64) -> Result<()> {
        let key = rho.to_bits();
        if !self.cache.contains_key(&key) {
            let f = match &self.kernel {
                Kernel::Direct { .. } => unreachable!("direct kernel has no ADMM factor"),
                Kernel::Spectral { v, s, av, ap, .. } => {
                    let inv = s.map(|s| 1.0 / (s * s + rho));
                    let mut scaled_av = av.clone();
                    for (j, mut col) in scaled_av.column_iter_mut().enumerate() {
                        col *= inv[j];
                    }
                    let y = v * scaled_av.transpose() + ap / rho;
                    let s = &scaled_av * av.transpose() + ap.tr_mul(ap) / rho;
                    Factor::Spectral {
                        s_inv: sym_inverse(&s),
                        inv,
                        y,
                    }
                }
                Kernel::Dense { h, null } => {
                    let mut m = h.clone();
                    for i in self.l1_block.clone() {
                        m[(i, i)] += rho;
                    }
                    let red = null.tr_mul(&(&m * null));
                    let red = (&red + red.transpose()) * 0.5;
                    let reduced = match red.clone().cholesky() {
                        Some(c) => c,
                        None => {
                            let lam = SymmetricEigen::new(red).eigenvalues.min();
                            return Err(Error::Unbounded { curvature: lam });
                        }
                    };
                    Factor::Dense { m, reduced }
                }
            };
            if self.cache.len() >= 64 {
                self.cache.clear();
            }
            self.cache.insert(key, f);
        }
        Ok(())
    }

    /// Fresh state for the current settings.
    pub fn initial_state(&self) -> AdmmState {
        let k = self.l1_block.len();
        AdmmState {
            y: DVector::zeros(k),
            u: DVector::zeros(k),
            rho: self.settings.rho,
        }
    }

    /// Solve with linear term `f` and right-hand side `b`, optionally warm
    /// started. Returns the report and the final iterate state.
    pub fn solve(
        &mut self,
        f: &DVector<f64>,
        b: &DVector<f64>,
        warm: Option<&AdmmState>,
    ) -> Result<(SolveReport, AdmmState)> {
        let n = self.dim();
        if f.len() != n {
            return Err(Error::dim("linear term", n, f.len()));
        }
        let split = match &self.kernel {
            Kernel::Spectral { v, .. } => {
                let vt_f = v.tr_mul(f);
                let perp = f - v * &vt_f;
                Some((vt_f, perp))
            }
            _ => None,
        };
        self.solve_split(f, split, b, warm)
    }

    /// Like [`solve`](Self::solve) with linear term `F^T h` for a Gram
    /// Hessian `F^T F`. The term is kept exactly inside `range(F^T)`, which
    /// matters when `F` spans many orders of magnitude.
    pub fn solve_gram(
        &mut self,
        h: &DVector<f64>,
        b: &DVector<f64>,
        warm: Option<&AdmmState>,
    ) -> Result<(SolveReport, AdmmState)> {
        let Hessian::Gram(fm) = &self.hessian else {
            return Err(Error::InvalidInput("Gram-form linear term needs a Gram Hessian".into()));
        };
        if h.len() != fm.nrows() {
            return Err(Error::dim("Gram linear factor", fm.nrows(), h.len()));
        }
        let f = fm.tr_mul(h);
        if let Kernel::Direct { ls: Some((null, fn_pinv)), .. } = &self.kernel {
            if b.len() != self.a_eq.nrows() {
                return Err(Error::dim("constraint rhs", self.a_eq.nrows(), b.len()));
            }
            let x_p = &self.a_pinv * b;
            self.check_feasible(&x_p, b)?;
            let x = &x_p - null * (fn_pinv * (fm * &x_p + h));
            let dual = null.tr_mul(&fm.tr_mul(&(fm * &x + h))).norm();
            return Ok((self.finish(&f, b, x, dual, 0, true), self.initial_state()));
        }
        let split = match &self.kernel {
            Kernel::Spectral { s, ut, .. } => {
                let vt_f = (ut * h).component_mul(s);
                Some((vt_f, DVector::zeros(f.len())))
            }
            _ => None,
        };
        self.solve_split(&f, split, b, warm)
    }

    fn solve_split(
        &mut self,
        f: &DVector<f64>,
        split: Option<(DVector<f64>, DVector<f64>)>,
        b: &DVector<f64>,
        warm: Option<&AdmmState>,
    ) -> Result<(SolveReport, AdmmState)> {
        let n = self.dim();
        if b.len() != self.a_eq.nrows() {
            return Err(Error::dim("constraint rhs", self.a_eq.nrows(), b.len()));
        }
        let x_p = &self.a_pinv * b;
        self.check_feasible(&x_p, b)?;

        if let Kernel::Direct { h, .. } = &self.kernel {
            let qp = EqConstrainedQP {
                hessian: Hessian::Dense(h.clone()),
                linear: f.clone(),
                a_eq: self.a_eq.clone(),
                b_eq: b.clone(),
            };
            let rep = solve_eq_qp(&qp, DIRECT_TOL)?;
            let state = self.initial_state();
            return Ok((self.finish(f, b, rep.x, rep.dual_residual, 0, true), state));
        }

        let s = self.settings;
        let g = self.l1_block.clone();
        let ng = g.len();
        let mut state = match warm {
            Some(w) if w.y.len() == ng && w.u.len() == ng && w.rho > 0.0 => w.clone(),
            _ => self.initial_state(),
        };
        let sqrt_ng = (ng as f64).sqrt();
        let mut x = DVector::zeros(n);
        let mut r_p = f64::INFINITY;
        let mut r_d = f64::INFINITY;
        let mut converged = false;
        let mut iters = 0;

        while iters < s.max_iter {
            iters += 1;
            let rho = state.rho;
            x = self.x_update(f, split.as_ref(), b, &x_p, &state)?;

            let y_old = state.y.clone();
            let thresh = self.l1_weight / rho;
            let mut xg_norm = 0.0;
            for (k, i) in g.clone().enumerate() {
                let xh = s.alpha * x[i] + (1.0 - s.alpha) * y_old[k];
                let y = soft(xh + state.u[k], thresh);
                state.u[k] += xh - y;
                state.y[k] = y;
                xg_norm += x[i] * x[i];
            }
            let xg_norm = xg_norm.sqrt();
            r_p = g
                .clone()
                .enumerate()
                .map(|(k, i)| (x[i] - state.y[k]).powi(2))
                .sum::<f64>()
                .sqrt();
            r_d = rho * (&state.y - &y_old).norm();
            let eps_p = s.tol * (sqrt_ng + xg_norm.max(state.y.norm()));
            let eps_d = s.tol * (sqrt_ng + rho * state.u.norm());
            if r_p <= eps_p && r_d <= eps_d {
                converged = true;
                break;
            }
            if s.balance_every > 0 && iters % s.balance_every == 0 {
                let ratio = (r_p / eps_p) / (r_d / eps_d).max(f64::MIN_POSITIVE);
                if ratio > s.balance_ratio && rho < 1e8 {
                    state.rho = rho * s.balance_factor;
                    state.u /= s.balance_factor;
                } else if ratio < 1.0 / s.balance_ratio && rho > 1e-8 {
                    state.rho = rho / s.balance_factor;
                    state.u *= s.balance_factor;
                }
            }
        }
        if !converged {
            // Keep the residual magnitude visible to callers.
            r_d = r_d.max(r_p);
        }
        Ok((self.finish(f, b, x, r_d, iters, converged), state))
    }

    fn x_update(
        &mut self,
        f: &DVector<f64>,
        split: Option<&(DVector<f64>, DVector<f64>)>,
        b: &DVector<f64>,
        x_p: &DVector<f64>,
        st: &AdmmState,
    ) -> Result<DVector<f64>> {
        let rho = st.rho;
        self.ensure_factor(rho)?;
        match (&self.kernel, &self.cache[&rho.to_bits()]) {
            (Kernel::Spectral { v, .. }, Factor::Spectral { inv, y, s_inv }) => {
                let (vt_f, perp_f) = split.expect("spectral kernel solves carry the split linear term");
                let d = &st.y - &st.u;
                let vd = v.tr_mul(&d);
                let coef = (&vd * rho - vt_f).component_mul(inv);
                let w = v * (coef - vd) + d - perp_f / rho;
                if self.a_eq.nrows() > 0 {
                    let nu = s_inv * (&self.a_eq * &w - b);
                    Ok(w - y * nu)
                } else {
                    Ok(w)
                }
            }
            (Kernel::Dense { null, .. }, Factor::Dense { m, reduced }) => {
                if null.ncols() == 0 {
                    return Ok(x_p.clone());
                }
                let mut c = -f;
                for (k, i) in self.l1_block.clone().enumerate() {
                    c[i] += rho * (st.y[k] - st.u[k]);
                }
                let rhs = null.tr_mul(&(c - m * x_p));
                Ok(x_p + null * reduced.solve(&rhs))
            }
            _ => unreachable!("factor kind follows the kernel"),
        }
    }

    /// Full objective including the l1 and slack penalties.
    pub fn objective(&self, f: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let l1: f64 = self.l1_block.clone().map(|i| x[i].abs()).sum();
        let slack: f64 = self.slack_block.clone().map(|i| x[i] * x[i]).sum();
        0.5 * self.hessian.apply(x).dot(x) + f.dot(x) + self.l1_weight * l1 + self.slack_weight * slack
    }

    fn check_feasible(&self, x_p: &DVector<f64>, b: &DVector<f64>) -> Result<()> {
        let feas = if b.is_empty() { 0.0 } else { (&self.a_eq * x_p - b).norm() };
        let feas_tol = self.settings.tol.max(DIRECT_TOL);
        if feas > feas_tol * (self.a_norm * x_p.norm() + b.norm()) {
            return Err(Error::Infeasible { residual: feas });
        }
        Ok(())
    }

    fn finish(
        &self,
        f: &DVector<f64>,
        b: &DVector<f64>,
        x: DVector<f64>,
        dual: f64,
        iterations: usize,
        converged: bool,
    ) -> SolveReport {
        let primal = if b.is_empty() { 0.0 } else { (&self.a_eq * &x - b).norm() };
        SolveReport {
            objective: self.objective(f, &x),
            x,
            primal_residual: primal,
            dual_residual: dual,
            multipliers: None,
            iterations,
            converged,
        }
    }
}

/// One-shot ADMM solve of `qp`.
pub fn solve_l1_slack_qp(qp: &L1SlackQP, max_iter: usize, tol: f64) -> Result<SolveReport> {
    let settings = AdmmSettings {
        max_iter,
        tol,
        ..AdmmSettings::default()
    };
    let mut solver = L1SlackSolver::new(qp, settings)?;
    let (rep, _) = solver.solve(&qp.core.linear, &qp.core.b_eq, None)?;
    Ok(rep)
}
