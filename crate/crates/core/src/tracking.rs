//! The receding-horizon tracking loop and the lifted MPC controllers.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::offline::disturbances_from_lifted;
use crate::qp::{solve_eq_qp, EqConstrainedQP, DIRECT_TOL};
use crate::reference::ReferenceTrajectory;
use crate::riccati::{riccati_recursion, RiccatiSolution};
use crate::systems::{CostWeights, KoopmanSystem};

/// What a controller sees at one solve.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    /// One-based scored time.
    pub t: usize,
    pub state: &'a DVector<f64>,
    /// `r_t, ..., r_{t+W-1}`; at the final solve `r_t, ..., r_T`.
    pub window: &'a [DVector<f64>],
    pub final_solve: bool,
}

/// A receding-horizon controller. One instance serves one run.
pub trait StepController: Send {
    fn name(&self) -> &str;

    /// Prediction window `W`.
    fn window(&self) -> usize;

    /// Steps and constant input to apply before the scored horizon starts.
    fn warmup(&self) -> Option<(usize, DVector<f64>)> {
        None
    }

    /// Record that `u` was applied at state `z`.
    fn observe(&mut self, _z: &DVector<f64>, _u: &DVector<f64>) {}

    /// Optimized control sequence over the window.
    fn plan(&mut self, ctx: &StepContext<'_>) -> Result<Vec<DVector<f64>>>;
}

/// One closed-loop execution.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingRun {
    pub system: String,
    pub controller: String,
    pub window: usize,
    /// `z_1, ..., z_T`.
    pub states: Vec<DVector<f64>>,
    /// `z_{T+1}`.
    pub final_state: DVector<f64>,
    pub controls: Vec<DVector<f64>>,
    pub targets: Vec<DVector<f64>>,
    pub stage_costs: Vec<f64>,
    pub total_cost: f64,
    /// Wall time of the solve issued at each step; zero for open-loop tail
    /// steps after the final solve.
    pub solve_ms: Vec<f64>,
    pub warmup_states: Vec<DVector<f64>>,
    pub warmup_controls: Vec<DVector<f64>>,
}

impl TrackingRun {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }
}

fn apply(sys: &KoopmanSystem, z: &DVector<f64>, u: &DVector<f64>, step: usize) -> Result<DVector<f64>> {
    let next = sys.step(z, u)?;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step });
    }
    Ok(next)
}

fn checked_plan(ctrl: &mut dyn StepController, ctx: &StepContext<'_>, n_u: usize) -> Result<Vec<DVector<f64>>> {
    let plan = ctrl.plan(ctx).map_err(|e| Error::Controller {
        step: ctx.t,
        source: Box::new(e),
    })?;
    let need = if ctx.final_solve { ctx.window.len() } else { 1 };
    if plan.len() < need || plan.iter().any(|u| u.len() != n_u || u.iter().any(|v| !v.is_finite())) {
        return Err(Error::Controller {
            step: ctx.t,
            source: Box::new(Error::InvalidInput(format!(
                "controller returned {} controls, expected {need} finite vectors of length {n_u}",
                plan.len()
            ))),
        });
    }
    Ok(plan)
}

/// Receding-horizon loop: apply the first control for `t <= T - W`, then one
/// final solve over `r_{T-W+1..T}` applied open loop.
///
/// A controller warm-up, if requested, runs from `z_start` first and is not
/// scored; the scored `z_1` is the post-warm-up state.
pub fn run_algorithm1(
    sys: &KoopmanSystem,
    ctrl: &mut dyn StepController,
    r: &ReferenceTrajectory,
    z_start: &DVector<f64>,
    weights: &CostWeights,
) -> Result<TrackingRun> {
    let horizon = r.horizon();
    let w = ctrl.window();
    if w == 0 || w > horizon {
        return Err(Error::InvalidInput(format!("window {w} must lie in 1..={horizon}")));
    }
    if r.dim() != sys.n_z() {
        return Err(Error::dim("reference dimension", sys.n_z(), r.dim()));
    }
    if z_start.len() != sys.n_z() {
        return Err(Error::dim("initial state", sys.n_z(), z_start.len()));
    }
    weights.check_dims(sys.n_z(), sys.n_u())?;

    let mut z = z_start.clone();
    let mut warmup_states = Vec::new();
    let mut warmup_controls = Vec::new();
    if let Some((steps, u0)) = ctrl.warmup() {
        for _ in 0..steps {
            let next = apply(sys, &z, &u0, 0)?;
            ctrl.observe(&z, &u0);
            warmup_states.push(z);
            warmup_controls.push(u0.clone());
            z = next;
        }
    }

    let n_u = sys.n_u();
    let mut states = Vec::with_capacity(horizon);
    let mut controls = Vec::with_capacity(horizon);
    let mut stage_costs = Vec::with_capacity(horizon);
    let mut solve_ms = Vec::with_capacity(horizon);
    let targets = r.targets();

    let mut step = |z: &mut DVector<f64>, u: DVector<f64>, t: usize, ms: f64, ctrl: &mut dyn StepController| -> Result<()> {
        stage_costs.push(weights.stage_cost(z, &targets[t - 1], &u));
        let next = apply(sys, z, &u, t)?;
        ctrl.observe(z, &u);
        states.push(std::mem::replace(z, next));
        controls.push(u);
        solve_ms.push(ms);
        Ok(())
    };

    for t in 1..=(horizon - w) {
        let ctx = StepContext {
            t,
            state: &z,
            window: r.window(t - 1, w),
            final_solve: false,
        };
        let clock = Instant::now();
        let plan = checked_plan(ctrl, &ctx, n_u)?;
        let ms = clock.elapsed().as_secs_f64() * 1e3;
        let u = plan.into_iter().next().expect("checked length");
        step(&mut z, u, t, ms, ctrl)?;
    }

    let t0 = horizon - w + 1;
    let ctx = StepContext {
        t: t0,
        state: &z,
        window: r.window(t0 - 1, w),
        final_solve: true,
    };
    let clock = Instant::now();
    let plan = checked_plan(ctrl, &ctx, n_u)?;
    let mut ms = clock.elapsed().as_secs_f64() * 1e3;
    for (k, u) in plan.into_iter().take(w).enumerate() {
        step(&mut z, u, t0 + k, ms, ctrl)?;
        ms = 0.0;
    }

    let total_cost = stage_costs.iter().sum();
    Ok(TrackingRun {
        system: sys.name().to_string(),
        controller: ctrl.name().to_string(),
        window: w,
        states,
        final_state: z,
        controls,
        targets: targets.to_vec(),
        stage_costs,
        total_cost,
        solve_ms,
        warmup_states,
        warmup_controls,
    })
}

fn lift_window(sys: &KoopmanSystem, window: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    window.iter().map(|r| sys.lift(r)).collect()
}

/// Closed-form lifted MPC from a `W`-stage Riccati recursion with
/// terminal weight `Q`.
///
/// Its first control is
/// `-Kbar_1 (x_t - psi(r_t)) - sum_{k=1}^{W-1} Kbar_{1->k} (A psi(r_{t+k-1}) - psi(r_{t+k}))`.
/// The gains do not depend on `t`.
pub struct LmpcClosedForm {
    sys: KoopmanSystem,
    riccati: RiccatiSolution,
    window: usize,
}

impl LmpcClosedForm {
    pub fn new(sys: &KoopmanSystem, weights: &CostWeights, window: usize) -> Result<Self> {
        let lifted = sys.lifted_or_err()?;
        weights.check_dims(sys.n_z(), sys.n_u())?;
        if window < 2 {
            return Err(Error::InvalidInput("closed-form L-MPC needs a window of at least 2".into()));
        }
        let riccati = riccati_recursion(&lifted.a, &lifted.b, &weights.lifted_q(&lifted.c), &weights.r, window)?;
        Ok(Self {
            sys: sys.clone(),
            riccati,
            window,
        })
    }

    /// `Kbar_1`.
    pub fn feedback_gain(&self) -> &DMatrix<f64> {
        self.riccati.k(1).expect("window >= 2")
    }

    /// `Kbar_{1->k}`, `1 <= k < W`.
    pub fn feedforward_gain(&self, k: usize) -> Result<DMatrix<f64>> {
        self.riccati.feedforward_gain(1, k)
    }

    pub fn riccati(&self) -> &RiccatiSolution {
        &self.riccati
    }

    /// First control only, by the explicit gain sum.
    pub fn first_control(&self, z: &DVector<f64>, window: &[DVector<f64>]) -> Result<DVector<f64>> {
        if window.len() != self.window {
            return Err(Error::dim("target window", self.window, window.len()));
        }
        let a = &self.sys.lifted_or_err()?.a;
        let psi = lift_window(&self.sys, window)?;
        let x = self.sys.lift(z)?;
        let mut u = -(self.feedback_gain() * (x - &psi[0]));
        for k in 1..self.window {
            let w = a * &psi[k - 1] - &psi[k];
            u -= self.feedforward_gain(k)? * w;
        }
        Ok(u)
    }
}

impl StepController for LmpcClosedForm {
    fn name(&self) -> &str {
        "lmpc"
    }

    fn window(&self) -> usize {
        self.window
    }

    fn plan(&mut self, ctx: &StepContext<'_>) -> Result<Vec<DVector<f64>>> {
        if ctx.window.len() != self.window {
            return Err(Error::dim("target window", self.window, ctx.window.len()));
        }
        let lifted = self.sys.lifted_or_err()?;
        let psi = lift_window(&self.sys, ctx.window)?;
        let dist = disturbances_from_lifted(&lifted.a, &psi);
        let ff = self.riccati.feedforward_sums(&dist.w)?;
        let mut x = self.sys.lift(ctx.state)?;
        let mut out = Vec::with_capacity(self.window);
        for i in 1..=self.window {
            if i == self.window {
                out.push(DVector::zeros(lifted.n_u()));
                break;
            }
            let u = -(self.riccati.k(i)? * (&x - &psi[i - 1])) - &ff[i - 1];
            x = lifted.step(&x, &u);
            out.push(u);
        }
        Ok(out)
    }
}

/// Lifted MPC solved as an equality-constrained QP over `(x_{1..W}, u_{1..W})`.
pub struct LmpcQp {
    sys: KoopmanSystem,
    window: usize,
    hessian: DMatrix<f64>,
    a_eq: DMatrix<f64>,
    q: DMatrix<f64>,
}

impl LmpcQp {
    pub fn new(sys: &KoopmanSystem, weights: &CostWeights, window: usize) -> Result<Self> {
        let lifted = sys.lifted_or_err()?;
        weights.check_dims(sys.n_z(), sys.n_u())?;
        if window == 0 {
            return Err(Error::InvalidInput("window must be positive".into()));
        }
        let (nx, nu) = (lifted.n_x(), lifted.n_u());
        let q = weights.lifted_q(&lifted.c);
        let nvar = window * (nx + nu);
        let ux = window * nx;
        let mut hessian = DMatrix::zeros(nvar, nvar);
        for i in 0..window {
            hessian.view_mut((i * nx, i * nx), (nx, nx)).copy_from(&(&q * 2.0));
            hessian
                .view_mut((ux + i * nu, ux + i * nu), (nu, nu))
                .copy_from(&(&weights.r * 2.0));
        }
        // x_1 = psi(z_t); x_{i+1} - A x_i - B u_i = 0.
        let mut a_eq = DMatrix::zeros(window * nx, nvar);
        a_eq.view_mut((0, 0), (nx, nx)).fill_with_identity();
        for i in 1..window {
            let row = i * nx;
            a_eq.view_mut((row, i * nx), (nx, nx)).fill_with_identity();
            a_eq.view_mut((row, (i - 1) * nx), (nx, nx)).copy_from(&(-&lifted.a));
            a_eq.view_mut((row, ux + (i - 1) * nu), (nx, nu)).copy_from(&(-&lifted.b));
        }
        Ok(Self {
            sys: sys.clone(),
            window,
            hessian,
            a_eq,
            q,
        })
    }
}

impl StepController for LmpcQp {
    fn name(&self) -> &str {
        "lmpc_qp"
    }

    fn window(&self) -> usize {
        self.window
    }

    fn plan(&mut self, ctx: &StepContext<'_>) -> Result<Vec<DVector<f64>>> {
        if ctx.window.len() != self.window {
            return Err(Error::dim("target window", self.window, ctx.window.len()));
        }
        let lifted = self.sys.lifted_or_err()?;
        let (nx, nu) = (lifted.n_x(), lifted.n_u());
        let psi = lift_window(&self.sys, ctx.window)?;
        let nvar = self.hessian.nrows();
        let mut f = DVector::zeros(nvar);
        for (i, p) in psi.iter().enumerate() {
            f.rows_mut(i * nx, nx).copy_from(&(&self.q * p * -2.0));
        }
        let mut b = DVector::zeros(self.a_eq.nrows());
        b.rows_mut(0, nx).copy_from(&self.sys.lift(ctx.state)?);
        let qp = EqConstrainedQP::new(self.hessian.clone(), f, self.a_eq.clone(), b)?;
        let rep = solve_eq_qp(&qp, DIRECT_TOL)?;
        let ux = self.window * nx;
        Ok((0..self.window)
            .map(|i| rep.x.rows(ux + i * nu, nu).into_owned())
            .collect())
    }
}
