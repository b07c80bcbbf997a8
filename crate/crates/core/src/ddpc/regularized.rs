//! Regularized DDPC with an l1 penalty on `g`, a quadratic slack on the
//! state history, and orientation-based library switching.

use std::f64::consts::{FRAC_PI_2, TAU};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::controller::{split_controls, stacked_targets, stacked_weights, InitBuffer, WarmupPolicy};
use super::library::DataLibrary;
use crate::error::{Error, Result};
use crate::qp::{AdmmSettings, AdmmState, EqConstrainedQP, Hessian, L1SlackQP, L1SlackSolver, SolveReport};
use crate::systems::CostWeights;
use crate::tracking::{StepContext, StepController};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegDdpcParams {
    pub lambda_g: f64,
    pub lambda_z: f64,
}

impl RegDdpcParams {
    pub fn new(lambda_g: f64, lambda_z: f64) -> Result<Self> {
        if !(lambda_g >= 0.0 && lambda_g.is_finite()) || !(lambda_z >= 0.0 && lambda_z.is_finite()) {
            return Err(Error::InvalidInput("regularization weights must be finite and nonnegative".into()));
        }
        Ok(Self { lambda_g, lambda_z })
    }
}

/// Picks one of four libraries by the quadrant of a heading coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrientationSwitcher {
    pub angle_index: usize,
}

impl OrientationSwitcher {
    pub fn new(angle_index: usize) -> Self {
        Self { angle_index }
    }

    /// Quadrant of `angle` wrapped to `[0, 2 pi)`, lower bounds inclusive.
    pub fn quadrant(angle: f64) -> usize {
        let a = angle.rem_euclid(TAU);
        ((a / FRAC_PI_2).floor() as usize).min(3)
    }

    /// The multiple of `2 pi` that brings `angle` into `[0, 2 pi)`.
    pub fn turns(angle: f64) -> f64 {
        TAU * (angle / TAU).floor()
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

struct LibrarySolver {
    lib: DataLibrary,
    solver: L1SlackSolver,
    u_f: DMatrix<f64>,
    state: Option<AdmmState>,
}

/// Each step solves
/// `min ||Z_F g - r||^2_Q + ||U_F g||^2_R + lambda_g ||g||_1 + lambda_z ||Z_P g - z_ini||^2`
/// subject to `U_P g = u_ini`, the slack `sigma = Z_P g - z_ini` having been
/// eliminated.
pub struct RegDdpcController {
    libs: Vec<LibrarySolver>,
    q_half: DMatrix<f64>,
    switcher: Option<OrientationSwitcher>,
    params: RegDdpcParams,
    warmup: WarmupPolicy,
    buffer: InitBuffer,
    t_ini: usize,
    window: usize,
    n_u: usize,
    active: usize,
    last: Option<SolveReport>,
}

impl RegDdpcController {
    /// One library without switching, or four with a switcher.
    pub fn new(
        libs: Vec<DataLibrary>,
        weights: &CostWeights,
        params: RegDdpcParams,
        switcher: Option<OrientationSwitcher>,
        settings: AdmmSettings,
        warmup: WarmupPolicy,
    ) -> Result<Self> {
        let first = libs
            .first()
            .ok_or_else(|| Error::InvalidInput("at least one data library is required".into()))?;
        let (t_ini, window, n_u, n_z) = (first.t_ini(), first.window(), first.n_u(), first.n_z());
        if libs
            .iter()
            .any(|l| (l.t_ini(), l.window(), l.n_u(), l.n_z()) != (t_ini, window, n_u, n_z))
        {
            return Err(Error::InvalidInput("libraries disagree in T_ini, W or dimensions".into()));
        }
        match switcher {
            Some(s) if libs.len() != 4 || s.angle_index >= n_z => {
                return Err(Error::InvalidInput(
                    "orientation switching needs exactly 4 libraries and a valid angle index".into(),
                ))
            }
            None if libs.len() != 1 => {
                return Err(Error::InvalidInput("several libraries need a switcher".into()));
            }
            _ => {}
        }
        weights.check_dims(n_z, n_u)?;
        let (q, r) = stacked_weights(weights, window);
        let (q_half, r_half) = (psd_sqrt(&q), psd_sqrt(&r));
        let sqrt2 = std::f64::consts::SQRT_2;
        let solvers = libs
            .into_iter()
            .map(|lib| {
                let (z_f, u_f, z_p, u_p) = (lib.z_f(), lib.u_f(), lib.z_p(), lib.u_p());
                let l = lib.columns();
                let rows = z_f.nrows() + u_f.nrows() + z_p.nrows();
                let mut f = DMatrix::zeros(rows, l);
                f.rows_mut(0, z_f.nrows()).copy_from(&(&q_half * &z_f * sqrt2));
                f.rows_mut(z_f.nrows(), u_f.nrows()).copy_from(&(&r_half * &u_f * sqrt2));
                f.rows_mut(z_f.nrows() + u_f.nrows(), z_p.nrows())
                    .copy_from(&(&z_p * (2.0 * params.lambda_z).sqrt()));
                let qp = L1SlackQP {
                    core: EqConstrainedQP {
                        hessian: Hessian::Gram(f),
                        linear: DVector::zeros(l),
                        b_eq: DVector::zeros(u_p.nrows()),
                        a_eq: u_p,
                    },
                    l1_weight: params.lambda_g,
                    l1_block: if params.lambda_g > 0.0 { 0..l } else { 0..0 },
                    slack_weight: 0.0,
                    slack_block: 0..0,
                };
                Ok(LibrarySolver {
                    solver: L1SlackSolver::new(&qp, settings)?,
                    u_f,
                    lib,
                    state: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            libs: solvers,
            q_half,
            switcher,
            params,
            warmup,
            buffer: InitBuffer::new(t_ini, n_u, n_z),
            t_ini,
            window,
            n_u,
            active: 0,
            last: None,
        })
    }

    pub fn params(&self) -> RegDdpcParams {
        self.params
    }

    /// Index of the library used by the most recent solve.
    pub fn active_library(&self) -> usize {
        self.active
    }

    pub fn library(&self, k: usize) -> Option<&DataLibrary> {
        self.libs.get(k).map(|s| &s.lib)
    }

    pub fn last_solution(&self) -> Option<&SolveReport> {
        self.last.as_ref()
    }

    pub fn prefill(&mut self, u: &[DVector<f64>], z: &[DVector<f64>]) -> Result<()> {
        if u.len() != z.len() || u.len() < self.t_ini {
            return Err(Error::TooShort {
                required: self.t_ini,
                got: u.len().min(z.len()),
            });
        }
        self.buffer.clear();
        for (u, z) in u.iter().zip(z) {
            self.buffer.push(u, z);
        }
        Ok(())
    }
}

impl StepController for RegDdpcController {
    fn name(&self) -> &str {
        "reg_ddpc"
    }

    fn window(&self) -> usize {
        self.window
    }

    fn warmup(&self) -> Option<(usize, DVector<f64>)> {
        match self.warmup {
            WarmupPolicy::ZeroInput => Some((self.t_ini, DVector::zeros(self.n_u))),
            WarmupPolicy::Prefilled => None,
        }
    }

    fn observe(&mut self, z: &DVector<f64>, u: &DVector<f64>) {
        self.buffer.push(u, z);
    }

    fn plan(&mut self, ctx: &StepContext<'_>) -> Result<Vec<DVector<f64>>> {
        if !self.buffer.is_full() {
            return Err(Error::InvalidInput("history buffer is not filled".into()));
        }
        let mut r = stacked_targets(ctx.window, self.window)?;
        let mut z_ini = self.buffer.z_ini();
        let n_z = ctx.state.len();
        self.active = match self.switcher {
            Some(s) => {
                let angle = ctx.state[s.angle_index];
                let shift = OrientationSwitcher::turns(angle);
                for k in 0..self.t_ini {
                    z_ini[k * n_z + s.angle_index] -= shift;
                }
                for k in 0..self.window {
                    r[k * n_z + s.angle_index] -= shift;
                }
                OrientationSwitcher::quadrant(angle)
            }
            None => 0,
        };
        let u_ini = self.buffer.u_ini();
        let sqrt2 = std::f64::consts::SQRT_2;
        let qr = &self.q_half * &r * -sqrt2;
        let n_uf = self.window * self.n_u;
        let mut h = DVector::zeros(qr.len() + n_uf + z_ini.len());
        h.rows_mut(0, qr.len()).copy_from(&qr);
        h.rows_mut(qr.len() + n_uf, z_ini.len())
            .copy_from(&(&z_ini * -(2.0 * self.params.lambda_z).sqrt()));
        let ls = &mut self.libs[self.active];
        let (rep, state) = ls.solver.solve_gram(&h, &u_ini, ls.state.as_ref())?;
        if !rep.converged {
            return Err(Error::NoConvergence {
                iterations: rep.iterations,
                residual: rep.dual_residual.max(rep.primal_residual),
            });
        }
        ls.state = Some(state);
        let u = &ls.u_f * &rep.x;
        self.last = Some(rep);
        Ok(split_controls(u, self.n_u))
    }
}
