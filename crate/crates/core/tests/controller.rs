mod common;

use common::*;
use drmpc::conic::{ClarabelBackend, ConicBackend, SolveStatus, DEFAULT_TOLERANCE};
use drmpc::controller::{Controller, LAMBDA_ZERO_TOL};
use drmpc::DrmpcError;
use nalgebra::DVector;
use std::sync::Arc;

#[test]
fn horizon_one_matches_grid_oracle() {
    let ctrl = Controller::new(controller_config(1, 3.0, 1e-3, 0.8, 10.0)).unwrap();
    let x0 = DVector::from_vec(vec![0.4, -0.3]);
    let (u, st, _) = ctrl.step(&x0, None).unwrap();
    let x1 = ctrl.config().model.sys.step(&x0, &u, &DVector::from_vec(vec![0.05, -0.08]));
    let program = ctrl.build_problem(&x1, Some(&st)).unwrap();
    let sol = ClarabelBackend.solve(&program, DEFAULT_TOLERANCE).unwrap();
    assert_eq!(sol.status, SolveStatus::Optimal);
    let (best, v, lambda) = grid_oracle(&ctrl, &program, &x1, &st.candidate.z0(), (-3.0, 3.0));
    assert!((best - sol.objective).abs() < 1e-4, "grid {best} at ({v}, {lambda}) vs solver {}", sol.objective);
}

#[test]
fn first_solve_is_initialized_at_the_measurement() {
    let ctrl = Controller::new(controller_config(10, 3.4, 1e-4, 0.9, 0.0)).unwrap();
    let x = DVector::from_vec(vec![6.0, 0.0]);
    let (_, st, d) = ctrl.step(&x, None).unwrap();
    assert_eq!(d.lambda, 0.0);
    assert_eq!(d.tau, 0);
    assert!((&st.last.z0 - &x).amax() < 1e-9);
    assert!(st.last.sadf.toeplitz_deviation() < 1e-9);
}

#[test]
fn infeasible_initial_state_is_an_initialization_error() {
    let ctrl = Controller::new(controller_config(10, 3.4, 1e-4, 0.9, 0.0)).unwrap();
    // x_2 far below the bound cannot be recovered at stage 0.
    let err = ctrl.step(&DVector::from_vec(vec![0.0, -5.0]), None).unwrap_err();
    assert!(matches!(err, DrmpcError::Initialization(_)), "{err}");
}

#[test]
fn backends_give_the_same_closed_loop() {
    let cfg = controller_config(10, 3.4, 1e-4, 0.7, 0.0);
    let fast = Controller::new(cfg.clone()).unwrap();
    let slow = Controller::with_backend(cfg, Arc::new(ClarabelBackend)).unwrap();
    let ws = [[0.01, -0.02], [-0.015, 0.005], [0.0, 0.01], [0.02, -0.01], [-0.01, -0.01]];
    let (mut xa, mut xb) = (DVector::from_vec(vec![6.0, 0.0]), DVector::from_vec(vec![6.0, 0.0]));
    let (mut sa, mut sb) = (None, None);
    for w in ws {
        let w = DVector::from_vec(w.to_vec());
        let (ua, na, _) = fast.step(&xa, sa.as_ref()).unwrap();
        let (ub, nb, _) = slow.step(&xb, sb.as_ref()).unwrap();
        assert!((&ua - &ub).amax() < 1e-6, "{ua} vs {ub}");
        xa = fast.config().model.sys.step(&xa, &ua, &w);
        xb = slow.config().model.sys.step(&xb, &ub, &w);
        sa = Some(na);
        sb = Some(nb);
    }
}

#[test]
fn conditioning_age_resets_on_measurement_initialization() {
    let ctrl = Controller::new(controller_config(10, 3.4, 1e-4, 0.7, 1e6)).unwrap();
    let mut x = DVector::from_vec(vec![6.0, 0.0]);
    let mut state = None;
    for _ in 0..6 {
        let (u, st, d) = ctrl.step(&x, state.as_ref()).unwrap();
        if d.lambda <= LAMBDA_ZERO_TOL {
            assert_eq!(d.tau, 0);
        } else {
            assert!(d.tau >= 1);
        }
        x = ctrl.config().model.sys.step(&x, &u, &DVector::from_vec(vec![0.01, -0.01]));
        state = Some(st);
    }
}

#[test]
fn cost_decreases_along_a_noisy_run() {
    let ctrl = Controller::new(controller_config(10, 3.4, 1e-4, 0.8, 0.0)).unwrap();
    let mut x = DVector::from_vec(vec![6.0, 0.0]);
    let (u, mut st, _) = ctrl.step(&x, None).unwrap();
    let mut u = u;
    for k in 1..10 {
        let w = DVector::from_vec(vec![0.01 * (k as f64).sin(), -0.01 * (k as f64).cos()]);
        x = ctrl.config().model.sys.step(&x, &u, &w);
        let check = ctrl.cost_decrease_check(&st, &x).unwrap();
        let (next_u, next, d) = ctrl.step(&x, Some(&st)).unwrap();
        assert!(check.residual <= 1e-6, "step {k}: {check:?}");
        assert!(d.objective <= check.candidate_objective + 1e-6 * check.candidate_objective.abs().max(1.0));
        u = next_u;
        st = next;
    }
}
