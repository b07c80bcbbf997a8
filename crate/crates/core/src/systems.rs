//! Plants, their Koopman embeddings and quadratic tracking weights.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigenvalues;
use crate::rng::UniformStream;

pub type DynamicsFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type LiftingFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// `x+ = A x + B u`, `z = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedLinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LiftedLinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::dim("A columns", n, a.ncols()));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::dim("B rows", n, b.nrows()));
        }
        if c.ncols() != n || c.nrows() == 0 {
            return Err(Error::dim("C columns", n, c.ncols()));
        }
        if a.iter().chain(b.iter()).chain(c.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite system matrix".into()));
        }
        Ok(Self { a, b, c })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_z(&self) -> usize {
        self.c.nrows()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

#[derive(Clone)]
struct Embedding {
    lifting: LiftingFn,
    lifted: LiftedLinearSystem,
}

/// A discrete-time plant `z+ = f(z, u)` with an optional exact Koopman
/// embedding `(A, B, C, psi)`.
#[derive(Clone)]
pub struct KoopmanSystem {
    name: String,
    n_z: usize,
    n_u: usize,
    dynamics: DynamicsFn,
    embedding: Option<Embedding>,
}

impl fmt::Debug for KoopmanSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KoopmanSystem")
            .field("name", &self.name)
            .field("n_z", &self.n_z)
            .field("n_u", &self.n_u)
            .field("n_x", &self.n_x())
            .finish()
    }
}

impl KoopmanSystem {
    pub fn new(name: impl Into<String>, n_z: usize, n_u: usize, dynamics: DynamicsFn) -> Self {
        Self {
            name: name.into(),
            n_z,
            n_u,
            dynamics,
            embedding: None,
        }
    }

    /// Attach a lifting and its linear dynamics. Consistency with `f` is not
    /// checked here; see [`verify_embedding`].
    pub fn with_embedding(mut self, lifting: LiftingFn, lifted: LiftedLinearSystem) -> Result<Self> {
        if lifted.n_z() != self.n_z {
            return Err(Error::dim("C rows", self.n_z, lifted.n_z()));
        }
        if lifted.n_u() != self.n_u {
            return Err(Error::dim("B columns", self.n_u, lifted.n_u()));
        }
        self.embedding = Some(Embedding { lifting, lifted });
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_x(&self) -> Option<usize> {
        self.embedding.as_ref().map(|e| e.lifted.n_x())
    }

    pub fn lifted(&self) -> Option<&LiftedLinearSystem> {
        self.embedding.as_ref().map(|e| &e.lifted)
    }

    pub fn lifted_or_err(&self) -> Result<&LiftedLinearSystem> {
        self.lifted()
            .ok_or_else(|| Error::Unsupported(format!("system '{}' has no Koopman embedding", self.name)))
    }

    pub fn step(&self, z: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.n_z {
            return Err(Error::dim("state", self.n_z, z.len()));
        }
        if u.len() != self.n_u {
            return Err(Error::dim("input", self.n_u, u.len()));
        }
        Ok((self.dynamics)(z, u))
    }

    pub fn lift(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let e = self
            .embedding
            .as_ref()
            .ok_or_else(|| Error::Unsupported(format!("system '{}' has no lifting", self.name)))?;
        if z.len() != self.n_z {
            return Err(Error::dim("state", self.n_z, z.len()));
        }
        Ok((e.lifting)(z))
    }
}

/// Roll the plant forward; `out[0] = z1`, `out.len() = controls.len() + 1`.
pub fn simulate(sys: &KoopmanSystem, z1: &DVector<f64>, controls: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    if z1.len() != sys.n_z() {
        return Err(Error::dim("initial state", sys.n_z(), z1.len()));
    }
    let mut out = Vec::with_capacity(controls.len() + 1);
    out.push(z1.clone());
    for (k, u) in controls.iter().enumerate() {
        let next = sys.step(&out[k], u)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k + 1 });
        }
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingReport {
    pub max_dynamics_residual: f64,
    pub max_recovery_residual: f64,
    pub pass: bool,
}

/// Check `psi(f(z,u)) = A psi(z) + B u` and `z = C psi(z)` on the samples.
pub fn verify_embedding(sys: &KoopmanSystem, samples: &[(DVector<f64>, DVector<f64>)], tol: f64) -> Result<EmbeddingReport> {
    let lifted = sys.lifted_or_err()?;
    let mut dyn_res: f64 = 0.0;
    let mut rec_res: f64 = 0.0;
    for (z, u) in samples {
        let x = sys.lift(z)?;
        let next = sys.lift(&sys.step(z, u)?)?;
        dyn_res = dyn_res.max((next - lifted.step(&x, u)).norm());
        rec_res = rec_res.max((z - &lifted.c * &x).norm());
    }
    Ok(EmbeddingReport {
        max_dynamics_residual: dyn_res,
        max_recovery_residual: rec_res,
        pass: dyn_res <= tol && rec_res <= tol,
    })
}

/// `count` pairs with every coordinate uniform in `[low, high)`.
pub fn sample_pairs(sys: &KoopmanSystem, count: usize, low: f64, high: f64, seed: u64) -> Vec<(DVector<f64>, DVector<f64>)> {
    let mut rng = UniformStream::new(seed);
    (0..count)
        .map(|_| {
            let z = DVector::from_fn(sys.n_z(), |_, _| rng.uniform(low, high));
            let u = DVector::from_fn(sys.n_u(), |_, _| rng.uniform(low, high));
            (z, u)
        })
        .collect()
}

fn selector(n_z: usize, n_x: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_z, n_x, |i, j| if i == j { 1.0 } else { 0.0 })
}

/// `z1+ = 0.99 z1`, `z2+ = z2 + z1^2 + u`, lifted by `psi(z) = (z1, z2, z1^2)`.
pub fn slow_manifold() -> KoopmanSystem {
    let lam = 0.99;
    let dynamics: DynamicsFn = Arc::new(move |z, u| DVector::from_vec(vec![lam * z[0], z[1] + z[0] * z[0] + u[0]]));
    let lifting: LiftingFn = Arc::new(|z| DVector::from_vec(vec![z[0], z[1], z[0] * z[0]]));
    let a = DMatrix::from_row_slice(3, 3, &[lam, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, lam * lam]);
    let b = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]);
    let lifted = LiftedLinearSystem::new(a, b, selector(2, 3)).expect("static dimensions");
    KoopmanSystem::new("slow_manifold", 2, 1, dynamics)
        .with_embedding(lifting, lifted)
        .expect("static dimensions")
}

/// `z1+ = 0.99 z1`, `z2+ = 0.9 z2 + z1^2 + z1^3 + z1^4 + u`, lifted by the
/// monomials `(z1, z2, z1^2, z1^3, z1^4)`.
pub fn quartic_manifold() -> KoopmanSystem {
    let lam: f64 = 0.99;
    let dynamics: DynamicsFn = Arc::new(move |z, u| {
        let z1 = z[0];
        DVector::from_vec(vec![lam * z1, 0.9 * z[1] + z1 * z1 + z1.powi(3) + z1.powi(4) + u[0]])
    });
    let lifting: LiftingFn = Arc::new(|z| {
        let z1 = z[0];
        DVector::from_vec(vec![z1, z[1], z1 * z1, z1.powi(3), z1.powi(4)])
    });
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(5, 5, &[
        lam, 0.0, 0.0, 0.0, 0.0,
        0.0, 0.9, 1.0, 1.0, 1.0,
        0.0, 0.0, lam.powi(2), 0.0, 0.0,
        0.0, 0.0, 0.0, lam.powi(3), 0.0,
        0.0, 0.0, 0.0, 0.0, lam.powi(4),
    ]);
    let b = DMatrix::from_column_slice(5, 1, &[0.0, 1.0, 0.0, 0.0, 0.0]);
    let lifted = LiftedLinearSystem::new(a, b, selector(2, 5)).expect("static dimensions");
    KoopmanSystem::new("quartic_manifold", 2, 1, dynamics)
        .with_embedding(lifting, lifted)
        .expect("static dimensions")
}

pub const UNICYCLE_DT: f64 = 0.025;

/// Kinematic unicycle with state `(x, y, heading)` and input `(v, w)`. The
/// heading is not wrapped.
pub fn unicycle(dt: f64) -> Result<KoopmanSystem> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidInput(format!("unicycle time step must be positive, got {dt}")));
    }
    let dynamics: DynamicsFn = Arc::new(move |z, u| {
        let (v, w) = (u[0], u[1]);
        DVector::from_vec(vec![
            z[0] + dt * z[2].cos() * v,
            z[1] + dt * z[2].sin() * v,
            z[2] + dt * w,
        ])
    });
    Ok(KoopmanSystem::new("unicycle", 3, 2, dynamics))
}

/// Look up a built-in system by id.
pub fn builtin(id: &str) -> Result<KoopmanSystem> {
    match id {
        "slow_manifold" => Ok(slow_manifold()),
        "quartic_manifold" => Ok(quartic_manifold()),
        "unicycle" => unicycle(UNICYCLE_DT),
        other => Err(Error::Config(format!(
            "unknown system '{other}' (expected slow_manifold, quartic_manifold or unicycle)"
        ))),
    }
}

/// Stage weights `Q_z` (PSD) and `R` (PD).
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q_z: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

const WEIGHT_TOL: f64 = 1e-12;

impl CostWeights {
    pub fn new(q_z: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        for (name, m) in [("Q_z", &q_z), ("R", &r)] {
            if !m.is_square() || m.nrows() == 0 {
                return Err(Error::InvalidInput(format!("{name} must be square and nonempty")));
            }
            if !crate::linalg::is_symmetric(m, 1e-12) {
                return Err(Error::InvalidInput(format!("{name} is not symmetric")));
            }
        }
        let qmin = symmetric_eigenvalues(&q_z)[0];
        if qmin < -WEIGHT_TOL * (1.0 + q_z.amax()) {
            return Err(Error::InvalidInput(format!("Q_z is not PSD (eigenvalue {qmin:e})")));
        }
        let rmin = symmetric_eigenvalues(&r)[0];
        if rmin <= WEIGHT_TOL {
            return Err(Error::InvalidInput(format!("R is not PD (eigenvalue {rmin:e})")));
        }
        Ok(Self { q_z, r })
    }

    pub fn diagonal(q_z: &[f64], r: &[f64]) -> Result<Self> {
        Self::new(
            DMatrix::from_diagonal(&DVector::from_row_slice(q_z)),
            DMatrix::from_diagonal(&DVector::from_row_slice(r)),
        )
    }

    /// Lifted state weight `C^T Q_z C`.
    pub fn lifted_q(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        c.transpose() * &self.q_z * c
    }

    /// `||z - r||^2_{Q_z} + ||u||^2_R`.
    pub fn stage_cost(&self, z: &DVector<f64>, r: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let e = z - r;
        (&self.q_z * &e).dot(&e) + (&self.r * u).dot(u)
    }

    pub fn check_dims(&self, n_z: usize, n_u: usize) -> Result<()> {
        if self.q_z.nrows() != n_z {
            return Err(Error::dim("Q_z size", n_z, self.q_z.nrows()));
        }
        if self.r.nrows() != n_u {
            return Err(Error::dim("R size", n_u, self.r.nrows()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    #[test]
    fn slow_manifold_step_by_hand() {
        let traj = simulate(&slow_manifold(), &v(&[1.0, 2.0]), &[v(&[0.5])]).unwrap();
        assert_relative_eq!(traj[1], v(&[0.99, 3.5]), epsilon = 1e-15);
    }

    #[test]
    fn empty_controls_return_initial_state() {
        let traj = simulate(&quartic_manifold(), &v(&[0.3, 0.1]), &[]).unwrap();
        assert_eq!(traj, vec![v(&[0.3, 0.1])]);
    }

    #[test]
    fn origin_is_a_fixed_point() {
        let traj = simulate(&quartic_manifold(), &v(&[0.0, 0.0]), &vec![v(&[0.0]); 10]).unwrap();
        assert_eq!(traj.len(), 11);
        assert!(traj.iter().all(|z| z.amax() == 0.0));
    }

    #[test]
    fn lift_examples() {
        assert_eq!(slow_manifold().lift(&v(&[1.0, 2.0])).unwrap(), v(&[1.0, 2.0, 1.0]));
        assert_eq!(slow_manifold().lift(&v(&[0.0, 0.0])).unwrap(), v(&[0.0, 0.0, 0.0]));
        assert_eq!(quartic_manifold().lift(&v(&[2.0, 3.0])).unwrap(), v(&[2.0, 3.0, 4.0, 8.0, 16.0]));
        assert!(matches!(unicycle(0.025).unwrap().lift(&v(&[0.0, 0.0, 0.0])), Err(Error::Unsupported(_))));
    }

    #[test]
    fn unicycle_step() {
        let z = unicycle(0.025).unwrap().step(&v(&[0.0, 0.0, 0.0]), &v(&[1.0, 0.0])).unwrap();
        assert_relative_eq!(z, v(&[0.025, 0.0, 0.0]), epsilon = 1e-15);
        assert!(unicycle(0.0).is_err());
    }

    #[test]
    fn perturbed_embedding_fails() {
        let good = slow_manifold();
        let mut lifted = good.lifted().unwrap().clone();
        lifted.a[(2, 2)] = 0.9;
        let lifting: LiftingFn = Arc::new(|z| DVector::from_vec(vec![z[0], z[1], z[0] * z[0]]));
        let dynamics = good.dynamics.clone();
        let bad = KoopmanSystem::new("bad", 2, 1, dynamics).with_embedding(lifting, lifted).unwrap();
        let rep = verify_embedding(&bad, &[(v(&[1.0, 0.0]), v(&[0.0]))], 1e-10).unwrap();
        assert!(!rep.pass);
        assert_relative_eq!(rep.max_dynamics_residual, 0.9801 - 0.9, epsilon = 1e-12);
    }

    #[test]
    fn divergence_names_the_step() {
        let blowup: DynamicsFn = Arc::new(|z, _| z * 1e200);
        let sys = KoopmanSystem::new("blowup", 1, 1, blowup);
        let err = simulate(&sys, &v(&[1.0]), &vec![v(&[0.0]); 5]).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 2 }));
    }

    #[test]
    fn weight_validation() {
        assert!(CostWeights::diagonal(&[0.0, 1.0], &[1.0]).is_ok());
        assert!(CostWeights::diagonal(&[-1.0, 1.0], &[1.0]).is_err());
        assert!(CostWeights::diagonal(&[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn builtin_lookup() {
        assert_eq!(builtin("quartic_manifold").unwrap().n_x(), Some(5));
        assert!(matches!(builtin("pendulum"), Err(Error::Config(_))));
        assert_eq!(slow_manifold().lifted().unwrap().a[(0, 0)], 0.99);
    }
}
