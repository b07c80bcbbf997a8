//! The optimal noncausal tracking policy and its value function.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::reference::ReferenceTrajectory;
use crate::riccati::{riccati_recursion, RiccatiSolution};
use crate::systems::{CostWeights, KoopmanSystem};

/// `w_t = A psi(r_t) - psi(r_{t+1})` for `t = 1..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSequence {
    pub w: Vec<DVector<f64>>,
    /// `max_t ||w_t||`.
    pub d_w: f64,
}

/// `psi(r_t)` for every target.
pub fn lifted_reference(sys: &KoopmanSystem, r: &ReferenceTrajectory) -> Result<Vec<DVector<f64>>> {
    if r.dim() != sys.n_z() {
        return Err(Error::dim("reference dimension", sys.n_z(), r.dim()));
    }
    r.targets().iter().map(|rt| sys.lift(rt)).collect()
}

pub fn disturbances_from_lifted(a: &DMatrix<f64>, psi_r: &[DVector<f64>]) -> DisturbanceSequence {
    let w: Vec<DVector<f64>> = psi_r.windows(2).map(|p| a * &p[0] - &p[1]).collect();
    let d_w = w.iter().map(|v| v.norm()).fold(0.0, f64::max);
    DisturbanceSequence { w, d_w }
}

pub fn disturbances(sys: &KoopmanSystem, r: &ReferenceTrajectory) -> Result<DisturbanceSequence> {
    let lifted = sys.lifted_or_err()?;
    Ok(disturbances_from_lifted(&lifted.a, &lifted_reference(sys, r)?))
}

/// `pi*_t(x; r) = -K_t (x - psi(r_t)) - sum_{i=t}^{T-1} K_{t->i} w_i`, and
/// `pi*_T = 0`.
#[derive(Debug, Clone)]
pub struct OfflinePolicy {
    riccati: Option<RiccatiSolution>,
    psi_r: Vec<DVector<f64>>,
    w: Vec<DVector<f64>>,
    feedforward: Vec<DVector<f64>>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    n_u: usize,
}

impl OfflinePolicy {
    pub fn new(sys: &KoopmanSystem, weights: &CostWeights, r: &ReferenceTrajectory) -> Result<Self> {
        let lifted = sys.lifted_or_err()?;
        weights.check_dims(sys.n_z(), sys.n_u())?;
        let psi_r = lifted_reference(sys, r)?;
        Self::from_lifted_reference(&lifted.a, &lifted.b, &weights.lifted_q(&lifted.c), &weights.r, psi_r)
    }

    /// Build from already lifted targets.
    pub fn from_lifted_reference(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
        psi_r: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let horizon = psi_r.len();
        if horizon == 0 {
            return Err(Error::InvalidInput("empty reference".into()));
        }
        let dist = disturbances_from_lifted(a, &psi_r);
        let (riccati, feedforward) = if horizon >= 2 {
            let sol = riccati_recursion(a, b, q, r, horizon)?;
            let ff = sol.feedforward_sums(&dist.w)?;
            (Some(sol), ff)
        } else {
            (None, Vec::new())
        };
        Ok(Self {
            riccati,
            psi_r,
            w: dist.w,
            feedforward,
            q: q.clone(),
            r: r.clone(),
            n_u: b.ncols(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.psi_r.len()
    }

    pub fn riccati(&self) -> Option<&RiccatiSolution> {
        self.riccati.as_ref()
    }

    pub fn psi_r(&self, t: usize) -> &DVector<f64> {
        &self.psi_r[t - 1]
    }

    pub fn disturbances(&self) -> &[DVector<f64>] {
        &self.w
    }

    /// `sum_{i=t}^{T-1} K_{t->i} w_i`, `1 <= t < T`.
    pub fn feedforward(&self, t: usize) -> &DVector<f64> {
        &self.feedforward[t - 1]
    }

    /// `Sigma_t` for `t < T`; `R` at the terminal step, whose Q-function is
    /// `||x - psi(r_T)||_Q^2 + ||u||_R^2`.
    pub fn sigma(&self, t: usize) -> Result<DMatrix<f64>> {
        if t == 0 || t > self.horizon() {
            return Err(Error::IndexOutOfRange(format!("time {t} outside 1..={}", self.horizon())));
        }
        match &self.riccati {
            Some(sol) if t < self.horizon() => Ok(sol.sigma(t)?.clone()),
            _ => Ok(self.r.clone()),
        }
    }

    /// Optimal control at one-based time `t` from lifted state `x`.
    pub fn control(&self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        let horizon = self.horizon();
        if t == 0 || t > horizon {
            return Err(Error::IndexOutOfRange(format!("time {t} outside 1..={horizon}")));
        }
        if t == horizon {
            return Ok(DVector::zeros(self.n_u));
        }
        let sol = self.riccati.as_ref().expect("horizon >= 2");
        Ok(-(sol.k(t)? * (x - &self.psi_r[t - 1])) - &self.feedforward[t - 1])
    }

    /// `||x - psi(r_t)||_Q^2 + ||u||_R^2`.
    pub fn stage_cost(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let e = x - &self.psi_r[t - 1];
        (&self.q * &e).dot(&e) + (&self.r * u).dot(u)
    }

    /// Closed-loop rollout of the policy on the lifted system from `x1`.
    pub fn rollout(&self, x1: &DVector<f64>) -> Result<OfflineSolution> {
        let sol_ab = self.riccati.as_ref().map(|s| (s.a().clone(), s.b().clone()));
        let horizon = self.horizon();
        let mut states = Vec::with_capacity(horizon);
        let mut controls = Vec::with_capacity(horizon);
        let mut stage_costs = Vec::with_capacity(horizon);
        let mut x = x1.clone();
        for t in 1..=horizon {
            let u = self.control(t, &x)?;
            stage_costs.push(self.stage_cost(t, &x, &u));
            states.push(x.clone());
            if t < horizon {
                let (a, b) = sol_ab.as_ref().expect("horizon >= 2");
                x = a * &x + b * &u;
            }
            controls.push(u);
        }
        let cost = stage_costs.iter().sum();
        Ok(OfflineSolution {
            controls,
            states,
            stage_costs,
            cost,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineSolution {
    /// `u*_1, ..., u*_T` with `u*_T = 0`.
    pub controls: Vec<DVector<f64>>,
    /// Lifted states `x*_1, ..., x*_T`.
    pub states: Vec<DVector<f64>>,
    pub stage_costs: Vec<f64>,
    /// `J_T*`.
    pub cost: f64,
}

/// Optimal offline controls from lifted initial state `x1`.
pub fn optimal_controls(sys: &KoopmanSystem, weights: &CostWeights, r: &ReferenceTrajectory, x1: &DVector<f64>) -> Result<OfflineSolution> {
    let policy = OfflinePolicy::new(sys, weights, r)?;
    if x1.len() != sys.n_x().unwrap_or(0) {
        return Err(Error::dim("lifted initial state", sys.n_x().unwrap_or(0), x1.len()));
    }
    policy.rollout(x1)
}

/// `V_t*(x) = (x - psi(r_t))^T P_t (x - psi(r_t)) + v_t^T (x - psi(r_t)) + q_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunctionCoeffs {
    p: Vec<DMatrix<f64>>,
    v: Vec<DVector<f64>>,
    q: Vec<f64>,
    psi_r: Vec<DVector<f64>>,
}

impl ValueFunctionCoeffs {
    pub fn horizon(&self) -> usize {
        self.p.len()
    }

    pub fn p(&self, t: usize) -> &DMatrix<f64> {
        &self.p[t - 1]
    }

    pub fn v(&self, t: usize) -> &DVector<f64> {
        &self.v[t - 1]
    }

    pub fn q(&self, t: usize) -> f64 {
        self.q[t - 1]
    }

    pub fn value(&self, t: usize, x: &DVector<f64>) -> f64 {
        let e = x - &self.psi_r[t - 1];
        (&self.p[t - 1] * &e).dot(&e) + self.v[t - 1].dot(&e) + self.q[t - 1]
    }
}

pub fn value_coeffs(sys: &KoopmanSystem, weights: &CostWeights, r: &ReferenceTrajectory) -> Result<ValueFunctionCoeffs> {
    let lifted = sys.lifted_or_err()?;
    weights.check_dims(sys.n_z(), sys.n_u())?;
    let psi_r = lifted_reference(sys, r)?;
    value_coeffs_lifted(&lifted.a, &lifted.b, &weights.lifted_q(&lifted.c), &weights.r, psi_r)
}

/// Backward recursion in block form:
/// `v_t = 2 M^T [w_t; v_{t+1}]` with `M = [P A; A/2] - [P B; B/2] Sigma^{-1} B^T P A`
/// and `q_t = [w_t; v_{t+1}]^T N [w_t; v_{t+1}] + q_{t+1}` with
/// `N = [[P, I/2], [I/2, 0]] - [P B; B/2] Sigma^{-1} [P B; B/2]^T`, `P = P_{t+1}`.
pub fn value_coeffs_lifted(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    psi_r: Vec<DVector<f64>>,
) -> Result<ValueFunctionCoeffs> {
    let horizon = psi_r.len();
    let n = a.nrows();
    let dist = disturbances_from_lifted(a, &psi_r);
    let mut p = vec![q.clone(); horizon];
    let mut v = vec![DVector::zeros(n); horizon];
    let mut qs = vec![0.0; horizon];
    if horizon >= 2 {
        let sol = riccati_recursion(a, b, q, r, horizon)?;
        for t in (1..horizon).rev() {
            let pn = sol.p(t + 1)?;
            let sigma_inv = sol.sigma_inv(t)?;
            let top = pn * b;
            let g = {
                let mut g = DMatrix::zeros(2 * n, b.ncols());
                g.view_mut((0, 0), (n, b.ncols())).copy_from(&top);
                g.view_mut((n, 0), (n, b.ncols())).copy_from(&(b * 0.5));
                g
            };
            let mut m = DMatrix::zeros(2 * n, n);
            m.view_mut((0, 0), (n, n)).copy_from(&(pn * a));
            m.view_mut((n, 0), (n, n)).copy_from(&(a * 0.5));
            let m = m - &g * sigma_inv * top.tr_mul(a);
            let mut nblk = DMatrix::zeros(2 * n, 2 * n);
            nblk.view_mut((0, 0), (n, n)).copy_from(pn);
            for i in 0..n {
                nblk[(i, n + i)] = 0.5;
                nblk[(n + i, i)] = 0.5;
            }
            let nblk = nblk - &g * sigma_inv * g.transpose();
            let mut wv = DVector::zeros(2 * n);
            wv.rows_mut(0, n).copy_from(&dist.w[t - 1]);
            wv.rows_mut(n, n).copy_from(&v[t]);
            v[t - 1] = m.tr_mul(&wv) * 2.0;
            qs[t - 1] = (&nblk * &wv).dot(&wv) + qs[t];
            p[t - 1] = sol.p(t)?.clone();
        }
    }
    Ok(ValueFunctionCoeffs { p, v, q: qs, psi_r })
}
