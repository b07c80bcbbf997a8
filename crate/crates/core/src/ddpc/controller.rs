//! The data-driven predictive controller on an exact Hankel library.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use super::library::DataLibrary;
use crate::error::{Error, Result};
use crate::linalg::{block_diag_repeat, concat};
use crate::qp::{solve_eq_qp, EqConstrainedQP, SolveReport, DIRECT_TOL};
use crate::systems::CostWeights;
use crate::tracking::{StepContext, StepController};

/// The last `T_ini` applied `(u, z)` pairs, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct InitBuffer {
    capacity: usize,
    n_u: usize,
    n_z: usize,
    entries: VecDeque<(DVector<f64>, DVector<f64>)>,
}

impl InitBuffer {
    pub fn new(capacity: usize, n_u: usize, n_z: usize) -> Self {
        Self {
            capacity,
            n_u,
            n_z,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, u: &DVector<f64>, z: &DVector<f64>) {
        debug_assert_eq!((u.len(), z.len()), (self.n_u, self.n_z));
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((u.clone(), z.clone()));
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn u_ini(&self) -> DVector<f64> {
        concat(&self.entries.iter().map(|(u, _)| u.clone()).collect::<Vec<_>>())
    }

    pub fn z_ini(&self) -> DVector<f64> {
        concat(&self.entries.iter().map(|(_, z)| z.clone()).collect::<Vec<_>>())
    }

    fn require_full(&self) -> Result<()> {
        if self.is_full() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "history buffer holds {} of {} samples",
                self.entries.len(),
                self.capacity
            )))
        }
    }
}

/// How the history buffer is filled before the first solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WarmupPolicy {
    /// `T_ini` zero-input steps from the given start state, not scored.
    #[default]
    ZeroInput,
    /// The caller fills the buffer through `prefill` before the run.
    Prefilled,
}

/// `Q_bar = I_W (x) Q_z`, `R_bar = I_W (x) R`.
pub(crate) fn stacked_weights(weights: &CostWeights, window: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    (block_diag_repeat(&weights.q_z, window), block_diag_repeat(&weights.r, window))
}

pub(crate) fn stacked_targets(window: &[DVector<f64>], w: usize) -> Result<DVector<f64>> {
    if window.len() != w {
        return Err(Error::dim("target window", w, window.len()));
    }
    Ok(concat(window))
}

pub(crate) fn split_controls(u: DVector<f64>, n_u: usize) -> Vec<DVector<f64>> {
    u.as_slice().chunks(n_u).map(DVector::from_column_slice).collect()
}

/// Solves, at each step, the program in `g` alone:
/// `min ||Z_F g - r||^2_Q + ||U_F g||^2_R  s.t.  U_P g = u_ini, Z_P g = z_ini`,
/// with the minimum-norm minimizer, and returns `U_F g`.
pub struct DdpcController {
    lib: DataLibrary,
    warmup: WarmupPolicy,
    buffer: InitBuffer,
    hessian: DMatrix<f64>,
    zf_q: DMatrix<f64>,
    a_eq: DMatrix<f64>,
    u_f: DMatrix<f64>,
    last: Option<SolveReport>,
}

impl DdpcController {
    pub fn new(lib: DataLibrary, weights: &CostWeights, warmup: WarmupPolicy) -> Result<Self> {
        weights.check_dims(lib.n_z(), lib.n_u())?;
        let (q, r) = stacked_weights(weights, lib.window());
        let (z_f, u_f) = (lib.z_f(), lib.u_f());
        let zf_q = z_f.tr_mul(&q);
        let hessian = (&zf_q * &z_f + u_f.tr_mul(&(&r * &u_f))) * 2.0;
        let hessian = (&hessian + hessian.transpose()) * 0.5;
        let (u_p, z_p) = (lib.u_p(), lib.z_p());
        let mut a_eq = DMatrix::zeros(u_p.nrows() + z_p.nrows(), lib.columns());
        a_eq.rows_mut(0, u_p.nrows()).copy_from(&u_p);
        a_eq.rows_mut(u_p.nrows(), z_p.nrows()).copy_from(&z_p);
        let buffer = InitBuffer::new(lib.t_ini(), lib.n_u(), lib.n_z());
        Ok(Self {
            lib,
            warmup,
            buffer,
            hessian,
            zf_q,
            a_eq,
            u_f,
            last: None,
        })
    }

    pub fn library(&self) -> &DataLibrary {
        &self.lib
    }

    pub fn buffer(&self) -> &InitBuffer {
        &self.buffer
    }

    /// Replace the history with the given chronological pairs.
    pub fn prefill(&mut self, u: &[DVector<f64>], z: &[DVector<f64>]) -> Result<()> {
        if u.len() != z.len() || u.len() < self.lib.t_ini() {
            return Err(Error::TooShort {
                required: self.lib.t_ini(),
                got: u.len().min(z.len()),
            });
        }
        self.buffer.clear();
        for (u, z) in u.iter().zip(z) {
            if u.len() != self.lib.n_u() || z.len() != self.lib.n_z() {
                return Err(Error::dim("history sample", self.lib.n_u() + self.lib.n_z(), u.len() + z.len()));
            }
            self.buffer.push(u, z);
        }
        Ok(())
    }

    /// Report of the most recent solve, with `x = g`.
    pub fn last_solution(&self) -> Option<&SolveReport> {
        self.last.as_ref()
    }

    /// Optimal `g` for the current history and a target window.
    pub fn solve_g(&self, window: &[DVector<f64>]) -> Result<SolveReport> {
        self.buffer.require_full()?;
        let r = stacked_targets(window, self.lib.window())?;
        let f = &self.zf_q * r * -2.0;
        let b = concat(&[self.buffer.u_ini(), self.buffer.z_ini()]);
        let qp = EqConstrainedQP::new(self.hessian.clone(), f, self.a_eq.clone(), b)?;
        solve_eq_qp(&qp, DIRECT_TOL)
    }
}

impl StepController for DdpcController {
    fn name(&self) -> &str {
        "ddpc"
    }

    fn window(&self) -> usize {
        self.lib.window()
    }

    fn warmup(&self) -> Option<(usize, DVector<f64>)> {
        match self.warmup {
            WarmupPolicy::ZeroInput => Some((self.lib.t_ini(), DVector::zeros(self.lib.n_u()))),
            WarmupPolicy::Prefilled => None,
        }
    }

    fn observe(&mut self, z: &DVector<f64>, u: &DVector<f64>) {
        self.buffer.push(u, z);
    }

    fn plan(&mut self, ctx: &StepContext<'_>) -> Result<Vec<DVector<f64>>> {
        let rep = self.solve_g(ctx.window)?;
        let u = &self.u_f * &rep.x;
        self.last = Some(rep);
        Ok(split_controls(u, self.lib.n_u()))
    }
}
