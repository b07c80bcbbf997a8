#![allow(dead_code)]

use koopman_ddpc::reference::{sine, ReferenceTrajectory};
use koopman_ddpc::systems::{quartic_manifold, CostWeights, KoopmanSystem};
use nalgebra::{DMatrix, DVector};

pub const T: usize = 200;

/// Quartic plant tracking a unit sine on `z2`, `Q_z = diag(0, 1)`.
pub fn quartic(r_scale: f64) -> (KoopmanSystem, CostWeights, ReferenceTrajectory) {
    let sys = quartic_manifold();
    let w = CostWeights::diagonal(&[0.0, 1.0], &[r_scale]).unwrap();
    let r = sine(2, 1, 1.0, 60.0, T).unwrap();
    (sys, w, r)
}

pub fn z(v: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(v)
}

pub fn max_gap(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// Dense tracking problem over `u_1..u_{T-1}` with the states eliminated,
/// solved by Cholesky. Returns the controls (with `u_T = 0` appended) and the
/// optimal cost.
pub struct DenseOracle {
    pub controls: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    pub cost: f64,
}

pub fn dense_tracking(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    targets: &[DVector<f64>],
    x1: &DVector<f64>,
) -> DenseOracle {
    let horizon = targets.len();
    let (n, m) = (a.nrows(), b.ncols());
    let nv = m * (horizon - 1);
    let mut powers = vec![DMatrix::<f64>::identity(n, n)];
    for k in 1..horizon {
        powers.push(a * &powers[k - 1]);
    }
    let mut gamma = DMatrix::zeros(n * horizon, nv);
    let mut free = DVector::zeros(n * horizon);
    for t in 0..horizon {
        free.rows_mut(t * n, n).copy_from(&(&powers[t] * x1 - &targets[t]));
        for k in 0..t {
            gamma
                .view_mut((t * n, k * m), (n, m))
                .copy_from(&(&powers[t - 1 - k] * b));
        }
    }
    let mut qbar = DMatrix::zeros(n * horizon, n * horizon);
    let mut rbar = DMatrix::zeros(nv, nv);
    for t in 0..horizon {
        qbar.view_mut((t * n, t * n), (n, n)).copy_from(q);
    }
    for k in 0..horizon - 1 {
        rbar.view_mut((k * m, k * m), (m, m)).copy_from(r);
    }
    let qg = &qbar * &gamma;
    let h = gamma.tr_mul(&qg) + &rbar;
    let g = qg.tr_mul(&free);
    let u = h.cholesky().expect("positive definite").solve(&(-g));
    let e = &free + &gamma * &u;
    let cost = (&qbar * &e).dot(&e) + (&rbar * &u).dot(&u);
    let mut controls: Vec<DVector<f64>> = (0..horizon - 1).map(|k| u.rows(k * m, m).into_owned()).collect();
    controls.push(DVector::zeros(m));
    let states = (0..horizon)
        .map(|t| e.rows(t * n, n).into_owned() + &targets[t])
        .collect();
    DenseOracle { controls, states, cost }
}
