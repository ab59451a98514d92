#![allow(dead_code)]

use drmpc::ambiguity::{AmbiguityCalibration, EmpiricalCovariance};
use drmpc::controller::ControllerConfig;
use drmpc::cost::CostWeights;
use drmpc::harness::{Scenario, ScenarioConfig};
use drmpc::policy::SadfPolicy;
use drmpc::prediction::{build_stacked, LtiSystem, StackedModel};
use drmpc::terminal::{terminal_halfspaces, TerminalIngredients};
use drmpc::tightening::{lift_all, ConstraintKind, StageConstraint};
use nalgebra::{dmatrix, DMatrix, DVector};
use proptest::prelude::*;

pub const SCENARIO: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/nominal.json");
pub const SCENARIO_UNMODELED: &str =
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/unmodeled.json");

pub fn double_integrator() -> LtiSystem {
    LtiSystem::new(
        dmatrix![1.0, 1.0; 0.0, 1.0],
        dmatrix![0.5; 1.0],
        DMatrix::identity(2, 2),
    )
    .unwrap()
}

pub fn model(n: usize) -> StackedModel {
    build_stacked(&double_integrator(), n).unwrap()
}

pub fn reference_weights(p: DMatrix<f64>) -> CostWeights {
    CostWeights::new(DMatrix::identity(2, 2) * 10.0, DMatrix::identity(1, 1), p).unwrap()
}

pub fn x2_constraint(level: f64) -> StageConstraint {
    StageConstraint {
        kind: ConstraintKind::State,
        stage_range: None,
        normal: vec![0.0, -1.0],
        rhs: 1.0,
        probability: level,
        terminal: true,
    }
}

/// Controller configuration on the double integrator with `x_2 >= -1`.
pub fn controller_config(horizon: usize, kappa: f64, sigma: f64, level: f64, lambda_penalty: f64) -> ControllerConfig {
    let m = model(horizon);
    let sys = m.sys.clone();
    let q = DMatrix::identity(2, 2) * 10.0;
    let r = DMatrix::identity(1, 1);
    let sigma_hat = EmpiricalCovariance::from_matrix(DMatrix::identity(2, 2) * sigma, 1000).unwrap();
    let constraints = vec![x2_constraint(level)];
    let specs = lift_all(&constraints, &m).unwrap();
    let ks = &sigma_hat.sigma_hat * kappa;
    let terminal =
        TerminalIngredients::synthesize(&sys, &q, &r, &ks, terminal_halfspaces(&constraints).unwrap()).unwrap();
    let weights = CostWeights::new(q, r, terminal.p.clone()).unwrap();
    ControllerConfig {
        model: m,
        weights,
        calib: AmbiguityCalibration {
            kappa,
            ..AmbiguityCalibration::exact_moments()
        },
        sigma_hat,
        constraints: specs,
        terminal,
        lambda_penalty,
        tolerance: 1e-8,
    }
}

pub fn nominal_scenario() -> Scenario {
    Scenario::load(std::path::Path::new(SCENARIO)).unwrap()
}

pub fn scenario_with(edit: impl FnOnce(&mut ScenarioConfig)) -> Scenario {
    let mut cfg = ScenarioConfig::load(std::path::Path::new(SCENARIO)).unwrap();
    edit(&mut cfg);
    Scenario::new(cfg).unwrap()
}

pub fn vec_strategy(len: usize, scale: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-scale..scale, len).prop_map(DVector::from_vec)
}

pub fn mat_strategy(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

/// Random SADF policy on the double integrator at horizon `n`.
pub fn sadf_strategy(n: usize) -> impl Strategy<Value = SadfPolicy> {
    (
        vec_strategy(n, 2.0),
        prop::collection::vec(mat_strategy(1, 2, 1.0), n - 1),
    )
        .prop_map(move |(v, blocks)| SadfPolicy::from_blocks(v, &blocks, 1, 2).unwrap())
}

/// Random covariance `L L^T + 1e-3 I`.
pub fn covariance_strategy(dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    mat_strategy(dim, dim, 1.0).prop_map(move |l| &l * l.transpose() + DMatrix::identity(dim, dim) * 1e-3)
}

/// Grid search over `(v_0, lambda)` for a horizon-1 program at step 1e-3.
/// Returns the smallest feasible objective and its grid point.
pub fn grid_oracle(
    ctrl: &drmpc::controller::Controller,
    program: &drmpc::conic::ConicProgram,
    x: &DVector<f64>,
    prev_z1: &DVector<f64>,
    v_range: (f64, f64),
) -> (f64, f64, f64) {
    let h = 1e-3;
    let nv = ((v_range.1 - v_range.0) / h).round() as usize;
    let mut best = (f64::INFINITY, f64::NAN, f64::NAN);
    for i in 0..=nv {
        let v = v_range.0 + i as f64 * h;
        let policy = SadfPolicy::from_blocks(DVector::from_element(1, v), &[], 1, 2).unwrap();
        for j in 0..=1000 {
            let lambda = j as f64 * h;
            let z0 = x + (prev_z1 - x) * lambda;
            let point = ctrl.pack(&policy, &z0, Some(lambda));
            if program.max_violation(&point) <= 1e-9 {
                let f = program.objective.value(&point);
                if f < best.0 {
                    best = (f, v, lambda);
                }
            }
        }
    }
    best
}
