mod common;

use common::{max_gap, quartic, z};
use koopman_ddpc::ddpc::{
    check_lifted_excitation, collect_excitation, load_data, save_data, DataDescriptor, DataLibrary, DataTrajectory,
    DdpcController, OrientationSwitcher, RegDdpcController, RegDdpcParams, WarmupPolicy,
};
use koopman_ddpc::linalg::{concat, machine_rank_tol, null_space, pinv_solve, RANK_TOL};
use koopman_ddpc::qp::{solve_eq_qp, AdmmSettings, EqConstrainedQP, DIRECT_TOL};
use koopman_ddpc::rng::UniformStream;
use koopman_ddpc::systems::{simulate, KoopmanSystem};
use koopman_ddpc::tracking::{run_algorithm1, LmpcClosedForm, StepContext, StepController};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use std::f64::consts::{FRAC_PI_2, PI, TAU};

fn data(sys: &KoopmanSystem, w: usize, seed: u64) -> DataTrajectory {
    data_of_length(sys, 2 * w + 24, seed)
}

fn data_of_length(sys: &KoopmanSystem, len: usize, seed: u64) -> DataTrajectory {
    let one = DVector::from_element(1, 1.0);
    collect_excitation(sys, &z(&[0.5, 0.0]), len, &(-&one), &one, seed).unwrap()
}

fn library(w: usize, t_ini: usize) -> (KoopmanSystem, DataLibrary) {
    let (sys, _, _) = quartic(1.0);
    let lib = DataLibrary::build(&data(&sys, w, 42), t_ini, w).unwrap();
    (sys, lib)
}

/// A fresh `T_ini`-step history of the true plant from a random state.
fn history(sys: &KoopmanSystem, t_ini: usize, seed: u64) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, DVector<f64>) {
    let mut rng = UniformStream::new(seed);
    let start = z(&[rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]);
    let u: Vec<DVector<f64>> = (0..t_ini).map(|_| DVector::from_element(1, rng.uniform(-1.0, 1.0))).collect();
    let mut traj = simulate(sys, &start, &u).unwrap();
    let now = traj.pop().unwrap();
    (u, traj, now)
}

fn prefilled(lib: DataLibrary, u: &[DVector<f64>], zs: &[DVector<f64>]) -> DdpcController {
    let (_, w, _) = quartic(1.0);
    let mut c = DdpcController::new(lib, &w, WarmupPolicy::Prefilled).unwrap();
    c.prefill(u, zs).unwrap();
    c
}

#[test]
fn columns_are_data_windows() {
    let (sys, _, _) = quartic(1.0);
    let d = data(&sys, 8, 3);
    let lib = DataLibrary::build(&d, 10, 8).unwrap();
    let depth = 18;
    assert_eq!(lib.columns(), d.len() - depth + 1);
    assert_eq!(lib.hd().nrows(), depth * 3);
    for j in 0..lib.columns() {
        let mut parts: Vec<DVector<f64>> = d.u[j..j + depth].to_vec();
        parts.extend_from_slice(&d.z[j..j + depth]);
        assert_eq!(lib.hd().column(j).into_owned(), concat(&parts));
    }
    let stacked = DMatrix::from_rows(
        &[lib.u_p(), lib.u_f(), lib.z_p(), lib.z_f()]
            .iter()
            .flat_map(|m| m.row_iter().map(|r| r.into_owned()).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
    );
    assert_eq!(&stacked, lib.hd());
}

#[test]
fn excitation_at_minimal_length() {
    for w in [5usize, 10, 15] {
        let (sys, lib) = library(w, 10);
        let rep = check_lifted_excitation(&lib, &sys).unwrap();
        assert!(rep.pass, "W={w}: {rep:?}");
        assert_eq!(rep.required, 10 + w + 5);
    }
}

#[test]
fn plant_windows_lie_in_the_column_span() {
    let (sys, lib) = library(10, 10);
    let depth = 20;
    let mut rng = UniformStream::new(77);
    for _ in 0..20 {
        let start = z(&[rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]);
        let u: Vec<DVector<f64>> = (0..depth).map(|_| DVector::from_element(1, rng.uniform(-1.0, 1.0))).collect();
        let mut zs = simulate(&sys, &start, &u).unwrap();
        zs.pop();
        let mut parts = u.clone();
        parts.extend(zs);
        let target = concat(&parts);
        let tol = machine_rank_tol(lib.hd().nrows(), lib.hd().ncols());
        let (g, rank) = pinv_solve(lib.hd(), &target, tol);
        assert_eq!(rank, depth + 5);
        let res = (lib.hd() * &g - &target).norm();
        assert!(res <= 1e-8 * (1.0 + target.norm()), "{res:e}");
        let mut fake = target.clone();
        fake[depth + 3] += 0.1;
        let (g, _) = pinv_solve(lib.hd(), &fake, tol);
        assert!((lib.hd() * &g - &fake).norm() > 1e-3);
    }
}

#[test]
fn g_only_program_matches_full_variable_program() {
    let (sys, weights, r) = quartic(1.0);
    let (w, t_ini) = (8, 10);
    let (_, lib) = library(w, t_ini);
    for seed in 0..5 {
        let (u_hist, z_hist, now) = history(&sys, t_ini, seed);
        let mut ctrl = prefilled(lib.clone(), &u_hist, &z_hist);
        let window = r.window(30 + seed as usize, w);
        let plan = ctrl.plan(&StepContext { t: 1, state: &now, window, final_solve: false }).unwrap();

        // Variables (u, z, g) with U_P g = u_ini, Z_P g = z_ini, U_F g = u, Z_F g = z.
        let (nu, nz, l) = (w, 2 * w, lib.columns());
        let n = nu + nz + l;
        let mut h = DMatrix::zeros(n, n);
        let mut f = DVector::zeros(n);
        for i in 0..w {
            h[(i, i)] = 2.0 * weights.r[(0, 0)];
            for a in 0..2 {
                let k = nu + 2 * i + a;
                h[(k, k)] = 2.0 * weights.q_z[(a, a)];
                f[k] = -2.0 * weights.q_z[(a, a)] * window[i][a];
            }
        }
        let rows = t_ini + 2 * t_ini + nu + nz;
        let mut a_eq = DMatrix::zeros(rows, n);
        let mut b_eq = DVector::zeros(rows);
        a_eq.view_mut((0, nu + nz), (t_ini, l)).copy_from(&lib.u_p());
        b_eq.rows_mut(0, t_ini).copy_from(&concat(&u_hist));
        a_eq.view_mut((t_ini, nu + nz), (2 * t_ini, l)).copy_from(&lib.z_p());
        b_eq.rows_mut(t_ini, 2 * t_ini).copy_from(&concat(&z_hist));
        let r0 = 3 * t_ini;
        a_eq.view_mut((r0, nu + nz), (nu, l)).copy_from(&lib.u_f());
        a_eq.view_mut((r0, 0), (nu, nu)).fill_with_identity();
        a_eq.view_mut((r0, 0), (nu, nu)).scale_mut(-1.0);
        a_eq.view_mut((r0 + nu, nu + nz), (nz, l)).copy_from(&lib.z_f());
        for i in 0..nz {
            a_eq[(r0 + nu + i, nu + i)] = -1.0;
        }
        let full = solve_eq_qp(&EqConstrainedQP::new(h, f, a_eq, b_eq).unwrap(), DIRECT_TOL).unwrap();
        let u_full: Vec<DVector<f64>> = (0..w).map(|i| DVector::from_element(1, full.x[i])).collect();
        assert!(max_gap(&plan, &u_full) <= 1e-8, "seed {seed}");
    }
}

fn permutation_gap(len: usize) -> (f64, DdpcController) {
    let (sys, _, r) = quartic(1.0);
    let (w, t_ini) = (10, 10);
    let lib = DataLibrary::build(&data_of_length(&sys, len, 42), t_ini, w).unwrap();
    let mut perm: Vec<usize> = (0..lib.columns()).collect();
    perm.reverse();
    perm.swap(0, 5);
    let (u_hist, z_hist, now) = history(&sys, t_ini, 9);
    let mut a = prefilled(lib.clone(), &u_hist, &z_hist);
    let mut b = prefilled(lib.permuted(&perm).unwrap(), &u_hist, &z_hist);
    let ctx = StepContext { t: 1, state: &now, window: r.window(0, w), final_solve: false };
    let (pa, pb) = (a.plan(&ctx).unwrap(), b.plan(&ctx).unwrap());
    (max_gap(&pa, &pb), a)
}

#[test]
fn column_order_does_not_matter() {
    let (gap, _) = permutation_gap(100);
    assert!(gap <= 1e-10, "{gap:e}");
    // The minimal-length library is nearly rank deficient, which limits
    // the agreement to roughly cond(H_d) * eps.
    let (gap, _) = permutation_gap(2 * 10 + 24);
    assert!(gap <= 1e-6, "{gap:e}");
}

#[test]
fn null_directions_do_not_move_the_trajectory() {
    let (_, ctrl) = permutation_gap(100);
    let lib = ctrl.library();
    let g = ctrl.last_solution().unwrap().x.clone();
    let null = null_space(lib.hd(), RANK_TOL);
    assert!(null.ncols() > 0);
    let mut rng = UniformStream::new(1);
    for _ in 0..10 {
        let shift = &null * DVector::from_fn(null.ncols(), |_, _| rng.uniform(-10.0, 10.0));
        let moved = lib.hd() * (&g + shift) - lib.hd() * &g;
        assert!(moved.norm() <= 1e-10 * (1.0 + g.norm() * 10.0));
    }
}

#[test]
fn ddpc_reproduces_lmpc_including_tail() {
    let (sys, weights, r) = quartic(1.0);
    let w = 10;
    let (_, lib) = library(w, 10);
    let mut dd = DdpcController::new(lib, &weights, WarmupPolicy::ZeroInput).unwrap();
    let run_d = run_algorithm1(&sys, &mut dd, &r, &z(&[0.5, 0.0]), &weights).unwrap();
    let mut cf = LmpcClosedForm::new(&sys, &weights, w).unwrap();
    let run_c = run_algorithm1(&sys, &mut cf, &r, &run_d.states[0], &weights).unwrap();
    assert_eq!(run_d.warmup_states.len(), 10);
    assert!(max_gap(&run_d.controls, &run_c.controls) <= 1e-6);
    assert!(max_gap(&run_d.controls[190..], &run_c.controls[190..]) <= 1e-6);
}

#[test]
fn short_history_breaks_equivalence() {
    let (sys, weights, r) = quartic(1.0);
    let mut worst: f64 = 0.0;
    for w in [5usize, 10, 15] {
        let (_, lib) = library(w, 3);
        let mut dd = DdpcController::new(lib, &weights, WarmupPolicy::ZeroInput).unwrap();
        let run_d = run_algorithm1(&sys, &mut dd, &r, &z(&[2.5, 0.0]), &weights).unwrap();
        let mut cf = LmpcClosedForm::new(&sys, &weights, w).unwrap();
        let run_c = run_algorithm1(&sys, &mut cf, &r, &run_d.states[0], &weights).unwrap();
        worst = worst.max(max_gap(&run_d.controls, &run_c.controls));
    }
    assert!(worst > 1e-3, "{worst:e}");
}

#[test]
fn vanishing_regularization_recovers_ddpc() {
    let (sys, weights, r) = quartic(1.0);
    let w = 8;
    let (_, lib) = library(w, 10);
    let mut dd = DdpcController::new(lib.clone(), &weights, WarmupPolicy::ZeroInput).unwrap();
    let mut reg = RegDdpcController::new(
        vec![lib],
        &weights,
        RegDdpcParams::new(0.0, 1e8).unwrap(),
        None,
        AdmmSettings::default(),
        WarmupPolicy::ZeroInput,
    )
    .unwrap();
    let z0 = z(&[0.5, 0.0]);
    let a = run_algorithm1(&sys, &mut dd, &r, &z0, &weights).unwrap();
    let b = run_algorithm1(&sys, &mut reg, &r, &z0, &weights).unwrap();
    let gap = max_gap(&a.controls, &b.controls);
    assert!(gap <= 1e-4, "{gap:e}");
}

#[test]
fn runs_are_bit_identical() {
    let (sys, weights, r) = quartic(1.0);
    let run = || {
        let (_, lib) = library(6, 10);
        let mut dd = DdpcController::new(lib, &weights, WarmupPolicy::ZeroInput).unwrap();
        let mut run = run_algorithm1(&sys, &mut dd, &r, &z(&[0.5, 0.0]), &weights).unwrap();
        run.solve_ms.clear();
        run
    };
    assert_eq!(run(), run());
}

#[test]
fn persisted_data_rebuilds_the_same_library() {
    let (sys, _, _) = quartic(1.0);
    let d = data(&sys, 7, 42);
    let dir = tempfile::tempdir().unwrap();
    save_data(dir.path(), &d, &DataDescriptor::new(&d, 10, 7, 42)).unwrap();
    let (back, desc) = load_data(dir.path()).unwrap();
    assert_eq!(back, d);
    assert_eq!((desc.t_ini, desc.window, desc.source_seed), (10, 7, 42));
    assert_eq!(DataLibrary::build(&back, 10, 7).unwrap(), DataLibrary::build(&d, 10, 7).unwrap());
}

#[test]
fn collection_is_seeded() {
    let (sys, _, _) = quartic(1.0);
    assert_eq!(data(&sys, 5, 11), data(&sys, 5, 11));
    assert_ne!(data(&sys, 5, 11), data(&sys, 5, 12));
}

#[test]
fn quadrant_boundaries() {
    assert_eq!(OrientationSwitcher::quadrant(0.1), 0);
    assert_eq!(OrientationSwitcher::quadrant(FRAC_PI_2), 1);
    assert_eq!(OrientationSwitcher::quadrant(PI), 2);
    assert_eq!(OrientationSwitcher::quadrant(-PI / 4.0), 3);
    assert_eq!(OrientationSwitcher::quadrant(TAU), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quadrant_is_periodic(angle in -20.0..20.0f64, k in -5i32..5) {
        let shifted = angle + TAU * k as f64;
        let (a, b) = (OrientationSwitcher::quadrant(angle), OrientationSwitcher::quadrant(shifted));
        // Floating shifts may cross a boundary by one ulp.
        let near_edge = (angle.rem_euclid(FRAC_PI_2)).min(FRAC_PI_2 - angle.rem_euclid(FRAC_PI_2)) < 1e-9;
        prop_assert!(a == b || near_edge);
        prop_assert!(a < 4);
        let wrapped = angle - OrientationSwitcher::turns(angle);
        prop_assert!((0.0..TAU + 1e-12).contains(&wrapped));
    }

    #[test]
    fn hankel_column_reconstruction(seed in 0u64..1000, t_ini in 1usize..6, w in 1usize..6) {
        let (sys, _, _) = quartic(1.0);
        let d = data(&sys, 6, seed);
        let lib = DataLibrary::build(&d, t_ini, w).unwrap();
        let depth = t_ini + w;
        let j = (seed as usize) % lib.columns();
        let col = lib.hd().column(j);
        for k in 0..depth {
            prop_assert_eq!(col[k], d.u[j + k][0]);
            prop_assert_eq!(col[depth + 2 * k], d.z[j + k][0]);
            prop_assert_eq!(col[depth + 2 * k + 1], d.z[j + k][1]);
        }
    }
}
