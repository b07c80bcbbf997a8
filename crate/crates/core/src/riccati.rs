//! Finite-horizon Riccati recursion, its fixed point and the stability
//! quantities derived from them.
//!
//! Time indices are one-based throughout, as in `P_1, ..., P_T`.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{complex_condition, eigenvalues, fit_line, spectral_norm, spectral_radius, symmetric_eigenvalues, LineFit};

/// `{P_t, K_t, Sigma_t}` for a horizon `T`.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    horizon: usize,
    /// `p[t-1] = P_t`, `t = 1..=T`.
    p: Vec<DMatrix<f64>>,
    /// `k[t-1] = K_t`, `t = 1..T`.
    k: Vec<DMatrix<f64>>,
    sigma: Vec<DMatrix<f64>>,
    sigma_inv: Vec<DMatrix<f64>>,
    a_cl: Vec<DMatrix<f64>>,
}

fn check_weights(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    if !a.is_square() {
        return Err(Error::dim("A columns", n, a.ncols()));
    }
    if b.nrows() != n {
        return Err(Error::dim("B rows", n, b.nrows()));
    }
    if q.shape() != (n, n) {
        return Err(Error::dim("Q size", n, q.nrows()));
    }
    let m = b.ncols();
    if r.shape() != (m, m) {
        return Err(Error::dim("R size", m, r.nrows()));
    }
    if q.nrows() > 0 && symmetric_eigenvalues(q)[0] < -1e-9 * (1.0 + q.amax()) {
        return Err(Error::InvalidInput("Q is not PSD".into()));
    }
    if m > 0 && symmetric_eigenvalues(r)[0] <= 0.0 {
        return Err(Error::InvalidInput("R is not PD".into()));
    }
    Ok(())
}

struct Step {
    p: DMatrix<f64>,
    k: DMatrix<f64>,
    sigma: DMatrix<f64>,
    sigma_inv: DMatrix<f64>,
}

/// One backward step from `P_{t+1}`.
fn riccati_step(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p_next: &DMatrix<f64>, t: usize) -> Result<Step> {
    let pb = p_next * b;
    let sigma = r + b.tr_mul(&pb);
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let sigma_inv = sigma
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::IllPosed { step: t })?;
    let k = &sigma_inv * pb.tr_mul(a);
    let a_cl = a - b * &k;
    let p = q + a.tr_mul(&(p_next * a_cl));
    let p = (&p + p.transpose()) * 0.5;
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllPosed { step: t });
    }
    Ok(Step { p, k, sigma, sigma_inv })
}

/// Backward recursion from `P_T = Q`.
pub fn riccati_recursion(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, horizon: usize) -> Result<RiccatiSolution> {
    check_weights(a, b, q, r)?;
    if horizon < 2 {
        return Err(Error::InvalidInput(format!("Riccati horizon must be at least 2, got {horizon}")));
    }
    let t_max = horizon;
    let mut p = vec![DMatrix::zeros(0, 0); t_max];
    let mut k = vec![DMatrix::zeros(0, 0); t_max - 1];
    let mut sigma = k.clone();
    let mut sigma_inv = k.clone();
    let mut a_cl = k.clone();
    p[t_max - 1] = q.clone();
    for t in (1..t_max).rev() {
        let s = riccati_step(a, b, q, r, &p[t], t)?;
        a_cl[t - 1] = a - b * &s.k;
        p[t - 1] = s.p;
        k[t - 1] = s.k;
        sigma[t - 1] = s.sigma;
        sigma_inv[t - 1] = s.sigma_inv;
    }
    Ok(RiccatiSolution {
        a: a.clone(),
        b: b.clone(),
        horizon,
        p,
        k,
        sigma,
        sigma_inv,
        a_cl,
    })
}

impl RiccatiSolution {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    fn check(&self, t: usize, last: usize, what: &str) -> Result<usize> {
        if t == 0 || t > last {
            return Err(Error::IndexOutOfRange(format!("{what} index {t} outside 1..={last}")));
        }
        Ok(t - 1)
    }

    /// `P_t`, `1 <= t <= T`.
    pub fn p(&self, t: usize) -> Result<&DMatrix<f64>> {
        Ok(&self.p[self.check(t, self.horizon, "P")?])
    }

    /// `K_t`, `1 <= t < T`.
    pub fn k(&self, t: usize) -> Result<&DMatrix<f64>> {
        Ok(&self.k[self.check(t, self.horizon - 1, "K")?])
    }

    /// `Sigma_t = R + B^T P_{t+1} B`, `1 <= t < T`.
    pub fn sigma(&self, t: usize) -> Result<&DMatrix<f64>> {
        Ok(&self.sigma[self.check(t, self.horizon - 1, "Sigma")?])
    }

    pub fn sigma_inv(&self, t: usize) -> Result<&DMatrix<f64>> {
        Ok(&self.sigma_inv[self.check(t, self.horizon - 1, "Sigma")?])
    }

    /// `A_cl,t = A - B K_t`, `1 <= t < T`.
    pub fn a_cl(&self, t: usize) -> Result<&DMatrix<f64>> {
        Ok(&self.a_cl[self.check(t, self.horizon - 1, "A_cl")?])
    }

    /// `A_cl,t2 A_cl,t2-1 ... A_cl,t1+1`, the identity when `t1 = t2`.
    pub fn closed_loop_transition(&self, t1: usize, t2: usize) -> Result<DMatrix<f64>> {
        if t1 == 0 || t1 > t2 || t2 >= self.horizon {
            return Err(Error::IndexOutOfRange(format!(
                "transition {t1} -> {t2} needs 1 <= t1 <= t2 < {}",
                self.horizon
            )));
        }
        let n = self.a.nrows();
        let mut m = DMatrix::identity(n, n);
        for s in (t1 + 1)..=t2 {
            m = &self.a_cl[s - 1] * m;
        }
        Ok(m)
    }

    /// `K_{t->i} = Sigma_t^{-1} B^T A_cl,t->i^T P_{i+1}`, `1 <= t <= i < T`.
    pub fn feedforward_gain(&self, t: usize, i: usize) -> Result<DMatrix<f64>> {
        if t == 0 || t > i || i >= self.horizon {
            return Err(Error::IndexOutOfRange(format!(
                "feedforward gain {t} -> {i} needs 1 <= t <= i < {}",
                self.horizon
            )));
        }
        let phi = self.closed_loop_transition(t, i)?;
        Ok(&self.sigma_inv[t - 1] * self.b.transpose() * phi.transpose() * &self.p[i])
    }

    /// `sum_{i=t}^{T-1} K_{t->i} w_i` for every `t`, by the backward recursion
    /// `s_t = P_{t+1} w_t + A_cl,t+1^T s_{t+1}`, `s_{T-1} = P_T w_{T-1}`.
    ///
    /// `w[i-1] = w_i` for `i = 1..T`. Returns the sums for `t = 1..T-1`.
    pub fn feedforward_sums(&self, w: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let t_max = self.horizon;
        if w.len() != t_max - 1 {
            return Err(Error::dim("disturbance sequence", t_max - 1, w.len()));
        }
        let n = self.a.nrows();
        let mut s = DVector::zeros(n);
        let mut out = vec![DVector::zeros(0); t_max - 1];
        for t in (1..t_max).rev() {
            s = if t == t_max - 1 {
                &self.p[t] * &w[t - 1]
            } else {
                &self.p[t] * &w[t - 1] + self.a_cl[t].tr_mul(&s)
            };
            out[t - 1] = &self.sigma_inv[t - 1] * self.b.tr_mul(&s);
        }
        Ok(out)
    }

    /// Largest relative residual of the recursion identities over all steps.
    pub fn recursion_residual(&self, q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for t in 1..self.horizon {
            let pn = &self.p[t];
            let sigma = r + self.b.tr_mul(&(pn * &self.b));
            let gain = &self.sigma_inv[t - 1] * self.b.tr_mul(&(pn * &self.a));
            let p = q + self.a.tr_mul(&(pn * &self.a)) - self.a.tr_mul(&(pn * &self.b)) * &gain;
            let scale = 1.0 + pn.norm();
            worst = worst
                .max((sigma - &self.sigma[t - 1]).norm() / scale)
                .max((gain - &self.k[t - 1]).norm() / scale)
                .max((p - &self.p[t - 1]).norm() / scale);
        }
        worst
    }
}

pub fn feedforward_gain(sol: &RiccatiSolution, t: usize, i: usize) -> Result<DMatrix<f64>> {
    sol.feedforward_gain(t, i)
}

pub fn closed_loop_transition(sol: &RiccatiSolution, t1: usize, t2: usize) -> Result<DMatrix<f64>> {
    sol.closed_loop_transition(t1, t2)
}

/// Stationary solution of the Riccati equation.
#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub a_cl: DMatrix<f64>,
    pub spectral_radius: f64,
    /// `||P - Ric(P)|| / (1 + ||P||)` at the returned `P`.
    pub residual: f64,
    pub iterations: usize,
}

pub const DARE_TOL: f64 = 1e-12;
pub const DARE_MAX_ITER: usize = 100_000;

/// Fixed-point iteration of the Riccati map from `P = Q`.
pub fn solve_dare(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<DareSolution> {
    check_weights(a, b, q, r)?;
    let mut p = q.clone();
    let mut last = f64::INFINITY;
    for it in 1..=max_iter {
        let s = riccati_step(a, b, q, r, &p, it)?;
        let diff = (&s.p - &p).norm();
        let scale = 1.0 + p.norm();
        p = s.p;
        last = diff / scale;
        if !last.is_finite() || p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NoConvergence { iterations: it, residual: last });
        }
        if diff <= tol * scale {
            let fin = riccati_step(a, b, q, r, &p, it)?;
            let a_cl = a - b * &fin.k;
            let residual = (&fin.p - &p).norm() / (1.0 + p.norm());
            return Ok(DareSolution {
                spectral_radius: spectral_radius(&a_cl),
                p,
                k: fin.k,
                sigma: fin.sigma,
                a_cl,
                residual,
                iterations: it,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: last,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityDiagnostics {
    pub rho_cl: f64,
    pub gamma_inf: f64,
    pub kappa_est: f64,
    /// True when the eigenvector matrix was too ill-conditioned and `kappa_est`
    /// comes from a scaled Schur form instead.
    pub kappa_from_schur: bool,
    pub delta_stab_est: usize,
    /// False when no `d < T` met the contraction condition; `delta_stab_est`
    /// is then `T`.
    pub delta_stab_resolved: bool,
    pub rho_inf_est: f64,
    pub rho_inf_fit: Option<LineFit>,
    pub dare_residual: f64,
}

/// Floor below which `||P_t - P_inf||` is excluded from the rate fit.
pub const RATE_FIT_FLOOR: f64 = 1e-12;

const KAPPA_EIG_LIMIT: f64 = 1e8;

/// Eigenvector conditioning of `m`, by inverse iteration per eigenvalue.
fn eigenvector_condition(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let lams = eigenvalues(m);
    let mc: DMatrix<Complex<f64>> = m.map(|v| Complex::new(v, 0.0));
    let scale = 1.0 + m.amax();
    let mut vecs = DMatrix::<Complex<f64>>::zeros(n, n);
    for (j, &lam) in lams.iter().enumerate() {
        let shift = lam + Complex::new(1e-10 * scale * (1.0 + j as f64), 1e-11 * scale);
        let mut shifted = mc.clone();
        for i in 0..n {
            shifted[(i, i)] -= shift;
        }
        let lu = shifted.lu();
        let mut v = DVector::<Complex<f64>>::from_fn(n, |i, _| Complex::new(1.0 + 0.1 * i as f64, 0.05 * (j + i) as f64));
        for _ in 0..3 {
            v = match lu.solve(&v) {
                Some(x) => x,
                None => return f64::INFINITY,
            };
            let nv = v.norm();
            if !(nv > 0.0) || !nv.is_finite() {
                return f64::INFINITY;
            }
            v /= Complex::new(nv, 0.0);
        }
        vecs.set_column(j, &v);
    }
    complex_condition(&vecs)
}

/// Conditioning of `diag(1, d, d^2, ...)` that makes the real Schur form of
/// `m` contract at rate `gamma`, or infinity if none is found.
fn schur_condition(m: &DMatrix<f64>, gamma: f64) -> f64 {
    let n = m.nrows();
    let (_, t) = nalgebra::Schur::new(m.clone()).unpack();
    let mut d: f64 = 1.0;
    for _ in 0..60 {
        let scaled = DMatrix::from_fn(n, n, |i, j| {
            if j >= i {
                t[(i, j)] * d.powi(j as i32 - i as i32)
            } else {
                t[(i, j)] / d.powi(i as i32 - j as i32)
            }
        });
        if spectral_norm(&scaled) <= gamma {
            return d.powi(-(n as i32 - 1)).max(1.0);
        }
        d *= 0.5;
    }
    f64::INFINITY
}

pub fn stability_diagnostics(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, horizon: usize) -> Result<StabilityDiagnostics> {
    let dare = solve_dare(a, b, q, r, DARE_TOL, DARE_MAX_ITER)?;
    let sol = riccati_recursion(a, b, q, r, horizon)?;
    let rho_cl = dare.spectral_radius;
    let gamma_inf = 0.5 * (1.0 + rho_cl);

    let kv = eigenvector_condition(&dare.a_cl);
    let (kappa_est, kappa_from_schur) = if kv.is_finite() && kv <= KAPPA_EIG_LIMIT {
        (kv.max(1.0), false)
    } else {
        (schur_condition(&dare.a_cl, gamma_inf), true)
    };

    // Smallest d with the contraction condition holding for every d' >= d.
    let b_norm = spectral_norm(b);
    let margin = 0.5 * (1.0 - rho_cl);
    let mut delta = horizon;
    let mut resolved = false;
    for d in (1..horizon).rev() {
        let gap = (sol.k(horizon - d)? - &dare.k).norm();
        if gap * b_norm * kappa_est <= margin {
            delta = d;
            resolved = true;
        } else {
            break;
        }
    }
    if !resolved {
        delta = horizon;
    }

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in 1..=horizon {
        let gap = (sol.p(t)? - &dare.p).norm();
        if gap > RATE_FIT_FLOOR {
            xs.push((horizon - t) as f64);
            ys.push(gap.ln());
        }
    }
    let fit = fit_line(&xs, &ys);
    let rho_inf_est = fit.map(|f| f.slope.exp()).unwrap_or(0.0);

    Ok(StabilityDiagnostics {
        rho_cl,
        gamma_inf,
        kappa_est,
        kappa_from_schur,
        delta_stab_est: delta,
        delta_stab_resolved: resolved,
        rho_inf_est,
        rho_inf_fit: fit,
        dare_residual: dare.residual,
    })
}
