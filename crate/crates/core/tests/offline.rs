mod common;

use common::{dense_tracking, max_gap, quartic, z};
use koopman_ddpc::offline::{lifted_reference, optimal_controls, value_coeffs, OfflinePolicy};
use koopman_ddpc::reference::ReferenceTrajectory;
use koopman_ddpc::rng::UniformStream;
use koopman_ddpc::systems::{simulate, slow_manifold, CostWeights};
use nalgebra::DVector;
use proptest::prelude::*;

#[test]
fn closed_form_matches_dense_qp() {
    for r_scale in [1.0, 10.0] {
        let (sys, w, r) = quartic(r_scale);
        let l = sys.lifted().unwrap();
        let x1 = sys.lift(&z(&[0.5, 0.0])).unwrap();
        let psi_r = lifted_reference(&sys, &r).unwrap();
        let oracle = dense_tracking(&l.a, &l.b, &w.lifted_q(&l.c), &w.r, &psi_r, &x1);
        let sol = optimal_controls(&sys, &w, &r, &x1).unwrap();
        let rel = (sol.cost - oracle.cost).abs() / oracle.cost;
        assert!(rel <= 1e-8, "R={r_scale}: rel {rel:e}");
        assert!(max_gap(&sol.controls, &oracle.controls) <= 1e-7);
        assert!(max_gap(&sol.states, &oracle.states) <= 1e-7);
        let v1 = value_coeffs(&sys, &w, &r).unwrap().value(1, &x1);
        assert!((v1 - oracle.cost).abs() / oracle.cost <= 1e-8);
        assert!((v1 - sol.cost).abs() / sol.cost <= 1e-8);
    }
}

#[test]
fn lifted_cost_equals_plant_cost() {
    let (sys, w, r) = quartic(1.0);
    let z1 = z(&[0.5, 0.0]);
    let sol = optimal_controls(&sys, &w, &r, &sys.lift(&z1).unwrap()).unwrap();
    let traj = simulate(&sys, &z1, &sol.controls).unwrap();
    let plant: f64 = (0..r.horizon())
        .map(|t| w.stage_cost(&traj[t], r.get(t), &sol.controls[t]))
        .sum();
    assert!((plant - sol.cost).abs() <= 1e-8 * sol.cost);
}

#[test]
fn optimum_survives_single_control_perturbations() {
    let (sys, w, r) = quartic(1.0);
    let z1 = z(&[0.5, 0.0]);
    let sol = optimal_controls(&sys, &w, &r, &sys.lift(&z1).unwrap()).unwrap();
    let cost = |u: &[DVector<f64>]| -> f64 {
        let traj = simulate(&sys, &z1, u).unwrap();
        (0..r.horizon()).map(|t| w.stage_cost(&traj[t], r.get(t), &u[t])).sum()
    };
    let base = cost(&sol.controls);
    for t in [0usize, 1, 17, 60, 123, 198, 199] {
        for d in [1e-3, -1e-3] {
            let mut u = sol.controls.clone();
            u[t][0] += d;
            assert!(cost(&u) >= base - 1e-10 * base, "t={} d={d}", t + 1);
        }
    }
}

#[test]
fn first_control_depends_on_the_last_target() {
    let (sys, w, r) = quartic(1.0);
    let r = ReferenceTrajectory::new(r.targets()[..12].to_vec()).unwrap();
    let x1 = sys.lift(&z(&[0.5, 0.0])).unwrap();
    let base = optimal_controls(&sys, &w, &r, &x1).unwrap();
    let moved = r.with_tail_replaced(r.horizon() - 1, |_| z(&[0.0, 5.0])).unwrap();
    let other = optimal_controls(&sys, &w, &moved, &x1).unwrap();
    assert!((&base.controls[0] - &other.controls[0]).norm() > 1e-6);
    assert_eq!(base.controls[r.horizon() - 1], other.controls[r.horizon() - 1]);
}

#[test]
fn slow_manifold_matches_dense_qp() {
    let sys = slow_manifold();
    let w = CostWeights::diagonal(&[1.0, 1.0], &[0.5]).unwrap();
    let mut rng = UniformStream::new(9);
    let r = ReferenceTrajectory::new((0..40).map(|_| z(&[rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)])).collect()).unwrap();
    let l = sys.lifted().unwrap();
    let x1 = sys.lift(&z(&[1.0, -1.0])).unwrap();
    let oracle = dense_tracking(&l.a, &l.b, &w.lifted_q(&l.c), &w.r, &lifted_reference(&sys, &r).unwrap(), &x1);
    let sol = optimal_controls(&sys, &w, &r, &x1).unwrap();
    assert!((sol.cost - oracle.cost).abs() <= 1e-9 * oracle.cost);
    assert!(max_gap(&sol.controls, &oracle.controls) <= 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn value_function_satisfies_bellman(
        t in 1usize..200,
        x in prop::collection::vec(-2.0..2.0f64, 5),
    ) {
        let (sys, w, r) = quartic(1.0);
        let l = sys.lifted().unwrap();
        let vc = value_coeffs(&sys, &w, &r).unwrap();
        let policy = OfflinePolicy::new(&sys, &w, &r).unwrap();
        let x = DVector::from_vec(x);
        let psi = lifted_reference(&sys, &r).unwrap();
        let q = w.lifted_q(&l.c);
        // V_{t+1}(A x + B u) = (A x + B u - p)^T P (..) + v^T (..) + q is
        // quadratic in u; minimize it directly.
        let (p, v) = (vc.p(t + 1), vc.v(t + 1));
        let drift = &l.a * &x - &psi[t];
        let lhs = &w.r + l.b.transpose() * p * &l.b;
        let rhs = -(l.b.transpose() * (p * &drift + v * 0.5));
        let u = lhs.cholesky().unwrap().solve(&rhs);
        let e = &x - &psi[t - 1];
        let next = vc.value(t + 1, &(&l.a * &x + &l.b * &u));
        let bellman = (&q * &e).dot(&e) + (&w.r * &u).dot(&u) + next;
        let value = vc.value(t, &x);
        prop_assert!((bellman - value).abs() <= 1e-8 * (1.0 + value.abs()), "t={t}: {bellman} vs {value}");
        prop_assert!((policy.control(t, &x).unwrap() - u).norm() <= 1e-8 * (1.0 + x.norm()));
    }

    #[test]
    fn rollout_cost_equals_value_from_any_start(x in prop::collection::vec(-1.0..1.0f64, 2)) {
        let (sys, w, r) = quartic(1.0);
        let x1 = sys.lift(&DVector::from_vec(x)).unwrap();
        let sol = optimal_controls(&sys, &w, &r, &x1).unwrap();
        let v1 = value_coeffs(&sys, &w, &r).unwrap().value(1, &x1);
        prop_assert!((sol.cost - v1).abs() <= 1e-8 * (1.0 + v1));
        prop_assert!(sol.controls.last().unwrap().amax() == 0.0);
    }
}
