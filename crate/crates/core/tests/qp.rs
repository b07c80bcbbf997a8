use koopman_ddpc::linalg::pinv_solve;
use koopman_ddpc::qp::{
    solve_eq_qp, solve_l1_slack_qp, EqConstrainedQP, Hessian, L1SlackQP, DIRECT_TOL, ITERATIVE_MAX_ITER, ITERATIVE_TOL,
};
use koopman_ddpc::rng::UniformStream;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, rng: &mut UniformStream) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
}

fn vector(n: usize, rng: &mut UniformStream) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.uniform(-1.0, 1.0))
}

/// Random QP with a PSD Hessian of rank `h_rank` and `m` constraints.
fn random_qp(n: usize, h_rank: usize, m: usize, seed: u64) -> EqConstrainedQP {
    let mut rng = UniformStream::new(seed);
    let f = matrix(h_rank, n, &mut rng);
    let a = matrix(m, n, &mut rng);
    let x0 = vector(n, &mut rng);
    let b = &a * &x0;
    EqConstrainedQP::new(f.tr_mul(&f), vector(n, &mut rng) * 0.0 + &a.tr_mul(&vector(m, &mut rng)) + f.tr_mul(&vector(h_rank, &mut rng)), a, b).unwrap()
}

/// Orthonormal basis of `null(A)` from nalgebra's own SVD.
fn kernel(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let padded = if a.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.rows_mut(0, a.nrows()).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = padded.svd(false, true);
    let vt = svd.v_t.unwrap();
    let smax = svd.singular_values.max();
    let cols: Vec<usize> = (0..n).filter(|&i| svd.singular_values[i] <= 1e-10 * smax.max(1.0)).collect();
    DMatrix::from_fn(n, cols.len(), |i, j| vt[(cols[j], i)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kkt_stationarity_and_dominance(seed in 0u64..10_000, n in 3usize..9, m in 0usize..3) {
        let m = m.min(n - 1);
        let qp = random_qp(n, n, m, seed);
        let rep = solve_eq_qp(&qp, DIRECT_TOL).unwrap();
        prop_assert!(rep.converged);
        prop_assert!(rep.primal_residual <= DIRECT_TOL * (1.0 + qp.b_eq.norm()));
        let nu = rep.multipliers.clone().unwrap();
        let h = qp.hessian.to_dense();
        let kkt = (&h * &rep.x + &qp.linear + qp.a_eq.tr_mul(&nu)).norm();
        prop_assert!(kkt <= 10.0 * DIRECT_TOL * (1.0 + rep.x.norm()), "kkt {kkt:e}");

        let null = kernel(&qp.a_eq);
        let mut rng = UniformStream::new(seed ^ 0xabc);
        for _ in 0..50 {
            let y = &rep.x + &null * vector(null.ncols(), &mut rng);
            prop_assert!(qp.objective(&y) >= rep.objective - 1e-8);
        }
    }

    #[test]
    fn singular_hessian_gives_min_norm_minimizer(seed in 0u64..10_000) {
        // Rank-2 Hessian in 6 variables with 1 constraint leaves a 3-dim
        // flat subspace; the solver must pick the shortest minimizer.
        let qp = random_qp(6, 2, 1, seed);
        let rep = solve_eq_qp(&qp, DIRECT_TOL).unwrap();
        let h = qp.hessian.to_dense();
        let mut stacked = DMatrix::zeros(7, 6);
        stacked.rows_mut(0, 6).copy_from(&h);
        stacked.rows_mut(6, 1).copy_from(&qp.a_eq);
        let flat = kernel(&stacked);
        prop_assert_eq!(flat.ncols(), 3);
        let along = flat.tr_mul(&rep.x).norm();
        prop_assert!(along <= 1e-8 * (1.0 + rep.x.norm()), "component along flat directions {along:e}");
    }

    #[test]
    fn pinv_residual_is_minimal(seed in 0u64..10_000, rows in 1usize..7, cols in 1usize..7) {
        let mut rng = UniformStream::new(seed);
        let a = matrix(rows, cols, &mut rng);
        let b = vector(rows, &mut rng);
        let (x, rank) = pinv_solve(&a, &b, 1e-10);
        prop_assert_eq!(rank, rows.min(cols));
        let best = (&a * &x - &b).norm();
        for _ in 0..100 {
            let d = vector(cols, &mut rng) * 1e-3;
            prop_assert!((&a * (&x + d) - &b).norm() >= best - 1e-12);
        }
    }

    #[test]
    fn l1_solution_beats_feasible_perturbations(seed in 0u64..10_000, lam in 0.01..2.0f64) {
        let qp = random_qp(6, 6, 2, seed);
        let n = qp.dim();
        let l1 = L1SlackQP { core: qp, l1_weight: lam, l1_block: 0..n, slack_weight: 0.0, slack_block: 0..0 };
        let rep = solve_l1_slack_qp(&l1, ITERATIVE_MAX_ITER, ITERATIVE_TOL).unwrap();
        prop_assert!(rep.converged);
        let best = l1.objective(&rep.x);
        let null = kernel(&l1.core.a_eq);
        let mut rng = UniformStream::new(seed ^ 0x5eed);
        for scale in [1e-3, 1e-1, 1.0] {
            for _ in 0..20 {
                let y = &rep.x + &null * vector(null.ncols(), &mut rng) * scale;
                prop_assert!(l1.objective(&y) >= best - 1e-6, "scale {scale}");
            }
        }
    }
}

#[test]
fn zero_l1_weight_matches_direct_solve() {
    for seed in 0..20 {
        let qp = random_qp(8, 5, 3, seed);
        let direct = solve_eq_qp(&qp, DIRECT_TOL).unwrap();
        let l1 = L1SlackQP { core: qp.clone(), l1_weight: 0.0, l1_block: 0..8, slack_weight: 0.0, slack_block: 0..0 };
        let rep = solve_l1_slack_qp(&l1, ITERATIVE_MAX_ITER, ITERATIVE_TOL).unwrap();
        assert!((rep.x - &direct.x).amax() <= 1e-6, "seed {seed}");
    }
}

#[test]
fn gram_hessian_matches_dense() {
    let mut rng = UniformStream::new(11);
    let f = matrix(4, 7, &mut rng);
    let dense = EqConstrainedQP::new(f.tr_mul(&f), vector(7, &mut rng), matrix(2, 7, &mut rng), vector(2, &mut rng)).unwrap();
    let gram = EqConstrainedQP { hessian: Hessian::Gram(f), ..dense.clone() };
    let lam = 0.3;
    let solve = |core: EqConstrainedQP| {
        let qp = L1SlackQP { core, l1_weight: lam, l1_block: 0..7, slack_weight: 0.0, slack_block: 0..0 };
        solve_l1_slack_qp(&qp, ITERATIVE_MAX_ITER, 1e-9).unwrap()
    };
    let (a, b) = (solve(dense), solve(gram));
    assert!(a.converged && b.converged);
    assert!((a.x - b.x).amax() <= 1e-6);
}

#[test]
fn heavy_slack_weight_drives_slack_to_zero() {
    // min 1/2 ||x - c||^2 + lambda s^2  s.t.  x_1 + x_2 - s = 1, slack s = x_3.
    let c = DVector::from_vec(vec![2.0, 3.0, 0.0]);
    let core = EqConstrainedQP::new(
        DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.0])),
        -DVector::from_vec(vec![c[0], c[1], 0.0]),
        DMatrix::from_row_slice(1, 3, &[1.0, 1.0, -1.0]),
        DVector::from_element(1, 1.0),
    )
    .unwrap();
    let mut prev = f64::INFINITY;
    for lambda in [1e2, 1e4, 1e6, 1e8] {
        let qp = L1SlackQP { core: core.clone(), l1_weight: 0.0, l1_block: 0..0, slack_weight: lambda, slack_block: 2..3 };
        let rep = solve_l1_slack_qp(&qp, ITERATIVE_MAX_ITER, ITERATIVE_TOL).unwrap();
        let s = rep.x[2].abs();
        // Closed form: s = 4 / (1 + 4 lambda).
        assert!((s - 4.0 / (1.0 + 4.0 * lambda)).abs() <= 1e-9, "lambda {lambda}: {s}");
        assert!(s < prev);
        prev = s;
    }
    assert!(prev <= ITERATIVE_TOL * c.norm());
}
