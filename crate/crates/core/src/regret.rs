//! Dynamic regret, its control-deviation identity and the three-term bound.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{fit_line, quad_form, LineFit};
use crate::offline::OfflinePolicy;
use crate::reference::ReferenceTrajectory;
use crate::systems::{CostWeights, KoopmanSystem};
use crate::tracking::{LmpcClosedForm, TrackingRun};

/// `J_T*` together with the setup it was computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCost {
    pub system: String,
    pub z1: DVector<f64>,
    pub targets: Vec<DVector<f64>>,
    pub cost: f64,
}

/// Offline optimum from `z1` via the closed-form policy.
pub fn offline_oracle(sys: &KoopmanSystem, weights: &CostWeights, r: &ReferenceTrajectory, z1: &DVector<f64>) -> Result<OracleCost> {
    let policy = OfflinePolicy::new(sys, weights, r)?;
    let sol = policy.rollout(&sys.lift(z1)?)?;
    Ok(OracleCost {
        system: sys.name().to_string(),
        z1: z1.clone(),
        targets: r.targets().to_vec(),
        cost: sol.cost,
    })
}

/// `J_T - J_T*`.
pub fn dynamic_regret(run: &TrackingRun, oracle: &OracleCost) -> Result<f64> {
    if run.system != oracle.system {
        return Err(Error::Mismatch(format!("run on {} but oracle on {}", run.system, oracle.system)));
    }
    if run.states.first() != Some(&oracle.z1) {
        return Err(Error::Mismatch("initial states differ".into()));
    }
    if run.targets != oracle.targets {
        return Err(Error::Mismatch("reference trajectories differ".into()));
    }
    Ok(run.total_cost - oracle.cost)
}

fn check_run(run: &TrackingRun, r: &ReferenceTrajectory) -> Result<()> {
    if run.targets.as_slice() != r.targets() {
        return Err(Error::Mismatch("run was produced for a different reference".into()));
    }
    Ok(())
}

/// `sum_t ||u_t - pi*_t(x_t)||^2_{Sigma_t}` with `pi*` evaluated on the run's
/// own lifted states.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationIdentity {
    pub total: f64,
    pub per_step: Vec<f64>,
}

pub fn deviation_identity(run: &TrackingRun, sys: &KoopmanSystem, weights: &CostWeights, r: &ReferenceTrajectory) -> Result<DeviationIdentity> {
    check_run(run, r)?;
    let policy = OfflinePolicy::new(sys, weights, r)?;
    let per_step = run
        .states
        .iter()
        .zip(&run.controls)
        .enumerate()
        .map(|(k, (z, u))| {
            let t = k + 1;
            let d = u - policy.control(t, &sys.lift(z)?)?;
            Ok(quad_form(&d, &policy.sigma(t)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DeviationIdentity {
        total: per_step.iter().sum(),
        per_step,
    })
}

/// The three sums of the regret bound, each over `t = 1..T-W`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundDecomposition {
    pub truncation: f64,
    pub feedback: f64,
    pub feedforward: f64,
    /// Largest mismatch between the summed per-step components and the actual
    /// deviation `u_t - pi*_t(x_t)` of an L-MPC run.
    pub split_residual: f64,
}

impl BoundDecomposition {
    pub fn total(&self) -> f64 {
        self.truncation + self.feedback + self.feedforward
    }
}

/// Evaluate the truncation, feedback and feedforward deviations along the
/// run's realized lifted states, with the MPC gains of window `W`.
pub fn decompose_bound(
    run: &TrackingRun,
    sys: &KoopmanSystem,
    weights: &CostWeights,
    r: &ReferenceTrajectory,
    window: usize,
) -> Result<BoundDecomposition> {
    check_run(run, r)?;
    let horizon = r.horizon();
    if window < 2 || window > horizon {
        return Err(Error::InvalidInput(format!("window {window} must lie in 2..={horizon}")));
    }
    let policy = OfflinePolicy::new(sys, weights, r)?;
    let ric = policy
        .riccati()
        .ok_or_else(|| Error::InvalidInput("horizon must be at least 2".into()))?;
    let mpc = LmpcClosedForm::new(sys, weights, window)?;
    let k_bar = mpc.feedback_gain().clone();
    let kk_bar = (1..window).map(|k| mpc.feedforward_gain(k)).collect::<Result<Vec<_>>>()?;
    let w = policy.disturbances();
    let b_t = ric.b().transpose();
    let n = ric.a().nrows();

    let mut out = BoundDecomposition {
        truncation: 0.0,
        feedback: 0.0,
        feedforward: 0.0,
        split_residual: 0.0,
    };
    for t in 1..=horizon.saturating_sub(window) {
        let x = sys.lift(&run.states[t - 1])?;
        let sigma = ric.sigma(t)?;
        let s_inv_bt = ric.sigma_inv(t)? * &b_t;
        let e = &x - policy.psi_r(t);
        let fb = (ric.k(t)? - &k_bar) * &e;

        let mut phi = DMatrix::<f64>::identity(n, n);
        let mut head = DVector::zeros(ric.b().ncols());
        let mut ff = DVector::zeros(ric.b().ncols());
        for i in t..=(t + window - 2) {
            if i > t {
                phi = ric.a_cl(i)? * phi;
            }
            let gain = &s_inv_bt * phi.transpose() * ric.p(i + 1)?;
            head += &gain * &w[i - 1];
            ff += (gain - &kk_bar[i - t]) * &w[i - 1];
        }
        let trunc = policy.feedforward(t) - head;

        out.truncation += quad_form(&trunc, sigma);
        out.feedback += quad_form(&fb, sigma);
        out.feedforward += quad_form(&ff, sigma);
        let actual = &run.controls[t - 1] - policy.control(t, &x)?;
        out.split_residual = out.split_residual.max((fb + ff + trunc - actual).norm());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretReport {
    pub online_cost: f64,
    pub optimal_cost: f64,
    pub regret: f64,
    pub deviation_identity: f64,
    /// `|regret - deviation_identity|`.
    pub identity_gap: f64,
    pub decomposition: Option<BoundDecomposition>,
}

/// Regret, identity and, for windows of at least 2, the bound decomposition.
pub fn regret_report(run: &TrackingRun, sys: &KoopmanSystem, weights: &CostWeights, r: &ReferenceTrajectory) -> Result<RegretReport> {
    let z1 = run
        .states
        .first()
        .ok_or_else(|| Error::InvalidInput("empty run".into()))?;
    let oracle = offline_oracle(sys, weights, r, z1)?;
    let regret = dynamic_regret(run, &oracle)?;
    let ident = deviation_identity(run, sys, weights, r)?;
    let decomposition = if run.window >= 2 {
        Some(decompose_bound(run, sys, weights, r, run.window)?)
    } else {
        None
    };
    Ok(RegretReport {
        online_cost: run.total_cost,
        optimal_cost: oracle.cost,
        regret,
        deviation_identity: ident.total,
        identity_gap: (regret - ident.total).abs(),
        decomposition,
    })
}

/// Regret at or below this counts as converged to the optimum and is
/// excluded from log fits.
pub const REGRET_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub window: usize,
    pub regret: f64,
    pub truncation: f64,
    pub feedback: f64,
    pub feedforward: f64,
    pub identity_gap: f64,
    pub runtime_ms: f64,
}

impl SweepRow {
    pub fn log_regret(&self) -> f64 {
        self.regret.ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepFit {
    pub fit: LineFit,
    pub used: Vec<usize>,
    /// Windows dropped for nonpositive or converged regret.
    pub excluded: Vec<usize>,
}

/// Least squares of natural-log regret on `W`.
pub fn fit_sweep(rows: &[SweepRow]) -> Result<SweepFit> {
    let mut used = Vec::new();
    let mut excluded = Vec::new();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for row in rows {
        if row.regret > REGRET_FLOOR && row.regret.is_finite() {
            used.push(row.window);
            xs.push(row.window as f64);
            ys.push(row.log_regret());
        } else {
            excluded.push(row.window);
        }
    }
    let mut distinct = used.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need >= 3 W values with positive regret, have {}",
            distinct.len()
        )));
    }
    let fit = fit_line(&xs, &ys).ok_or_else(|| Error::InvalidInput("degenerate sweep".into()))?;
    Ok(SweepFit { fit, used, excluded })
}
