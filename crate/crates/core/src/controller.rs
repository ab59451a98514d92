//! Receding-horizon controller: assembles and solves the SOC program each step,
//! manages the interpolated initial condition, and applies the first input.

use std::sync::Arc;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::ambiguity::{AmbiguityCalibration, EmpiricalCovariance};
use crate::conic::{
    ClarabelBackend, ConicBackend, ConicProgram, InactiveShortcut, SocConstraint, SolveStatus,
};
use crate::cost::{trace_cost, CostWeights, WorstCaseSecondMoment};
use crate::error::{DrmpcError, Result};
use crate::linalg;
use crate::policy::{
    applied_input, sadf_to_ef, shift_candidate, shift_toeplitz_candidate, ErrorFeedbackPolicy,
    SadfPolicy, ShiftedCandidate,
};
use crate::prediction::{check_len, StackedModel};
use crate::terminal::TerminalIngredients;
use crate::tightening::{build_rows, covariance_factor, ConstraintKind, HalfspaceSpec, SocRow};

/// `lambda` at or below this value counts as a solve initialized at the
/// measured state.
pub const LAMBDA_ZERO_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub model: StackedModel,
    pub weights: CostWeights,
    pub calib: AmbiguityCalibration,
    pub sigma_hat: EmpiricalCovariance,
    pub constraints: Vec<HalfspaceSpec>,
    pub terminal: TerminalIngredients,
    pub lambda_penalty: f64,
    pub tolerance: f64,
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_penalty >= 0.0) || !self.lambda_penalty.is_finite() {
            return Err(DrmpcError::param("lambda_penalty", "must be finite and >= 0"));
        }
        if !(self.tolerance > 0.0) {
            return Err(DrmpcError::param("tolerance", "must be positive"));
        }
        check_len("Sigma_hat size", self.model.nw(), self.sigma_hat.dim())?;
        for h in &self.constraints {
            h.validate(&self.model)?;
        }
        let sys = &self.model.sys;
        if self.terminal.k.shape() != (sys.nu(), sys.nx()) {
            return Err(DrmpcError::DimensionMismatch {
                context: "terminal gain entries",
                expected: sys.nu() * sys.nx(),
                got: self.terminal.k.len(),
            });
        }
        self.weights.check_lyapunov(sys, &self.terminal.k, 1e-8)?;
        Ok(())
    }
}

/// Index bookkeeping for the decision vector `(v_bar, theta, z0, lambda)`.
#[derive(Debug, Clone, Copy)]
struct Layout {
    v: usize,
    theta: usize,
    z0: usize,
    lambda: Option<usize>,
    n_v: usize,
    n_theta: usize,
    n_vars: usize,
}

impl Layout {
    fn new(model: &StackedModel, with_lambda: bool) -> Self {
        let n_v = model.input_len();
        let n_theta = model.horizon.saturating_sub(1) * model.nu() * model.nw();
        let z0 = n_v + n_theta;
        let lambda = with_lambda.then_some(z0 + model.nx());
        Layout {
            v: 0,
            theta: n_v,
            z0,
            lambda,
            n_v,
            n_theta,
            n_vars: z0 + model.nx() + with_lambda as usize,
        }
    }
}

/// Solution of one program, in both policy forms.
#[derive(Debug, Clone, Serialize)]
pub struct Solved {
    pub sadf: SadfPolicy,
    pub ef: ErrorFeedbackPolicy,
    pub z0: DVector<f64>,
    pub lambda: f64,
    pub nominal: DVector<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct ControllerState {
    /// Time index of the solve that produced this state.
    pub step: usize,
    pub last: Solved,
    /// Shifted candidate for the next step; its first nominal state is the
    /// Mode 2 initialization.
    pub candidate: ShiftedCandidate,
    /// Steps since the last solve with `lambda = 0`.
    pub tau: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub lambda: f64,
    pub objective: f64,
    pub status: SolveStatus,
    pub input: DVector<f64>,
    pub nominal: DVector<f64>,
    /// Tightened-constraint slack `1 - a^T y - offset` per constraint row.
    pub slacks: Vec<f64>,
    pub tau: usize,
    /// `||x - z0||`, the gap between measured and predicted initial state.
    pub prediction_gap: f64,
    pub iterations: u32,
    #[serde(skip)]
    pub solve_time: Duration,
    pub retried: bool,
}

/// Outcome of the cost-decrease check between two consecutive solves.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CostDecreaseCheck {
    pub candidate_objective: f64,
    pub bound: f64,
    /// `candidate_objective - bound`; nonpositive when the decrease holds.
    pub residual: f64,
    /// Whether the block-Toeplitz candidate was admissible (and used).
    pub toeplitz_candidate: bool,
    /// Largest constraint violation of the candidate used.
    pub candidate_violation: f64,
}

pub struct Controller {
    config: ControllerConfig,
    moment: WorstCaseSecondMoment,
    rows: Vec<SocRow>,
    initial: ConicProgram,
    recurring: ConicProgram,
    backend: Arc<dyn ConicBackend>,
}

impl std::fmt::Debug for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Controller")
            .field("n_vars", &self.recurring.n_vars)
            .field("n_socs", &self.recurring.socs.len())
            .finish()
    }
}

fn theta_basis(model: &StackedModel) -> Vec<DMatrix<f64>> {
    let (nu, nw, n) = (model.nu(), model.nw(), model.horizon);
    let mut out = Vec::new();
    for s in 1..n {
        for a in 0..nu {
            for b in 0..nw {
                let mut m = DMatrix::zeros(n * nu, n * nw);
                for i in s..n {
                    m[(i * nu + a, (i - s) * nw + b)] = 1.0;
                }
                out.push(m);
            }
        }
    }
    out
}

/// Appends `||L^T (G(theta) + G0)||_F^2` where `G` is linear in theta, given
/// the images of the basis and the constant.
fn add_theta_squares(
    program: &mut ConicProgram,
    layout: &Layout,
    images: &[DMatrix<f64>],
    constant: &DMatrix<f64>,
) {
    let (r, c) = constant.shape();
    let mut f = DMatrix::zeros(r * c, program.n_vars);
    let mut off = DVector::zeros(r * c);
    for j in 0..c {
        for i in 0..r {
            let row = j * r + i;
            off[row] = constant[(i, j)];
            for (p, img) in images.iter().enumerate() {
                f[(row, layout.theta + p)] = img[(i, j)];
            }
        }
    }
    program.objective.add_squares(&f, &off);
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Result<Self> {
        Self::with_backend(config, Arc::new(InactiveShortcut::new(ClarabelBackend)))
    }

    pub fn with_backend(config: ControllerConfig, backend: Arc<dyn ConicBackend>) -> Result<Self> {
        config.validate()?;
        let moment = WorstCaseSecondMoment::new(config.calib.kappa, &config.sigma_hat)?;
        let s_block = covariance_factor(&config.sigma_hat)?;
        let rows = build_rows(&config.constraints, &config.model, &config.calib, &s_block)?;
        let initial = Self::template(&config, &moment, &rows, false)?;
        let recurring = Self::template(&config, &moment, &rows, true)?;
        Ok(Controller {
            config,
            moment,
            rows,
            initial,
            recurring,
            backend,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn moment(&self) -> &WorstCaseSecondMoment {
        &self.moment
    }

    pub fn rows(&self) -> &[SocRow] {
        &self.rows
    }

    /// Everything except the initial-condition equality, which depends on the
    /// measured state and the previous candidate.
    fn template(
        config: &ControllerConfig,
        moment: &WorstCaseSecondMoment,
        rows: &[SocRow],
        with_lambda: bool,
    ) -> Result<ConicProgram> {
        let model = &config.model;
        let (nx, n) = (model.nx(), model.horizon);
        let layout = Layout::new(model, with_lambda);
        let mut program = ConicProgram::new();
        program.add_block("v_bar", layout.n_v)?;
        program.add_block("m_blocks", layout.n_theta)?;
        program.add_block("z0", nx)?;
        if with_lambda {
            program.add_block("lambda", 1)?;
        }

        // z_bar = A_bar z0 + B_bar v_bar as a map on the decision vector.
        let mut zmap = DMatrix::zeros(model.state_len(), layout.n_vars);
        zmap.view_mut((0, layout.v), (model.state_len(), layout.n_v))
            .copy_from(&model.bbar);
        zmap.view_mut((0, layout.z0), (model.state_len(), nx))
            .copy_from(&model.abar);

        let qbar = config.weights.q_bar(n);
        let rbar = config.weights.r_bar(n);
        let lq = linalg::psd_factor(&qbar, 1e-12, "Q_bar")?;
        let lr = linalg::psd_factor(&rbar, 1e-12, "R_bar")?;

        // Nominal part.
        program
            .objective
            .add_squares(&(lq.transpose() * &zmap), &DVector::zeros(model.state_len()));
        let mut vmap = DMatrix::zeros(layout.n_v, layout.n_vars);
        vmap.view_mut((0, layout.v), (layout.n_v, layout.n_v))
            .fill_with_identity();
        program
            .objective
            .add_squares(&(lr.transpose() * &vmap), &DVector::zeros(layout.n_v));

        // Variance part, linear in the M blocks.
        let s = linalg::block_diag_repeat(&moment.factor, n);
        let basis = theta_basis(model);
        let state_images: Vec<DMatrix<f64>> = basis
            .iter()
            .map(|g| lq.transpose() * &model.bbar * g * &s)
            .collect();
        let state_const = lq.transpose() * &model.ebar * &s;
        add_theta_squares(&mut program, &layout, &state_images, &state_const);
        let input_images: Vec<DMatrix<f64>> =
            basis.iter().map(|g| lr.transpose() * g * &s).collect();
        let input_const = DMatrix::zeros(layout.n_v, s.ncols());
        add_theta_squares(&mut program, &layout, &input_images, &input_const);

        if let Some(l) = layout.lambda {
            if config.lambda_penalty > 0.0 {
                let mut f = DMatrix::zeros(1, layout.n_vars);
                f[(0, l)] = config.lambda_penalty.sqrt();
                program.objective.add_squares(&f, &DVector::zeros(1));
            }
        }
        program.objective.compress();

        // Placeholder initial-condition rows: z0 (- lambda d) = x.
        let mut eq = DMatrix::zeros(nx, layout.n_vars);
        eq.view_mut((0, layout.z0), (nx, nx)).fill_with_identity();
        program.add_equalities(&eq, &DVector::zeros(nx))?;

        for row in rows {
            let mut t = DVector::zeros(layout.n_vars);
            match row.spec.kind {
                ConstraintKind::State => {
                    let coeff = zmap.tr_mul(&row.spec.normal);
                    t -= coeff;
                }
                ConstraintKind::Input => {
                    t.rows_mut(layout.v, layout.n_v).copy_from(&(-&row.spec.normal));
                }
            }
            let (v, v0) = if row.active_blocks == 0 {
                (DMatrix::zeros(0, layout.n_vars), DVector::zeros(0))
            } else {
                let c = row.toeplitz_coefficients(n, model.nu());
                let mut v = DMatrix::zeros(c.nrows(), layout.n_vars);
                v.view_mut((0, layout.theta), (c.nrows(), layout.n_theta))
                    .copy_from(&(c * row.factor));
                (v, row.offset_vector() * row.factor)
            };
            program.add_soc(SocConstraint {
                name: format!("{:?} constraint {} stage {}", row.spec.kind, row.spec.index, row.spec.stage)
                    .to_lowercase(),
                t,
                t0: 1.0,
                v,
                v0,
            })?;
        }

        let alpha = config.terminal.alpha;
        if alpha.is_finite() {
            let lp = linalg::psd_factor(&config.terminal.p, 1e-12, "terminal P")?;
            let z_n = zmap.rows(n * nx, nx).into_owned();
            program.add_soc(SocConstraint {
                name: "terminal set".into(),
                t: DVector::zeros(layout.n_vars),
                t0: alpha.sqrt(),
                v: lp.transpose() * z_n,
                v0: DVector::zeros(nx),
            })?;
        }

        if let Some(l) = layout.lambda {
            program.add_bound(l, Some(0.0), Some(1.0))?;
        }
        Ok(program)
    }

    /// The program for measured state `x`; at the first step (`state = None`)
    /// `lambda` is absent and `z0 = x`.
    pub fn build_problem(&self, x: &DVector<f64>, state: Option<&ControllerState>) -> Result<ConicProgram> {
        let nx = self.config.model.nx();
        check_len("measured state", nx, x.len())?;
        match state {
            None => {
                let mut p = self.initial.clone();
                p.eq_b.copy_from(x);
                Ok(p)
            }
            Some(st) => {
                let layout = Layout::new(&self.config.model, true);
                let mut p = self.recurring.clone();
                let d = st.candidate.z0() - x;
                let l = layout.lambda.expect("recurring layout has lambda");
                for i in 0..nx {
                    p.eq_a[(i, l)] = -d[i];
                }
                p.eq_b.copy_from(x);
                Ok(p)
            }
        }
    }

    fn unpack(&self, x: &DVector<f64>, with_lambda: bool, objective: f64) -> Result<Solved> {
        let model = &self.config.model;
        let layout = Layout::new(model, with_lambda);
        let (nu, nw) = (model.nu(), model.nw());
        let vbar = x.rows(layout.v, layout.n_v).into_owned();
        let blocks: Vec<DMatrix<f64>> = (1..model.horizon)
            .map(|s| {
                let start = layout.theta + (s - 1) * nu * nw;
                DMatrix::from_row_slice(nu, nw, x.rows(start, nu * nw).as_slice())
            })
            .collect();
        let sadf = SadfPolicy::from_blocks(vbar, &blocks, nu, nw)?;
        let z0 = x.rows(layout.z0, model.nx()).into_owned();
        let lambda = layout.lambda.map_or(0.0, |l| x[l].clamp(0.0, 1.0));
        let ef = sadf_to_ef(&sadf, model)?;
        let nominal = crate::prediction::nominal_trajectory(model, &z0, &sadf.vbar)?;
        Ok(Solved {
            sadf,
            ef,
            z0,
            lambda,
            nominal,
            objective,
        })
    }

    /// Decision vector for a block-Toeplitz SADF policy.
    pub fn pack(&self, policy: &SadfPolicy, z0: &DVector<f64>, lambda: Option<f64>) -> DVector<f64> {
        let layout = Layout::new(&self.config.model, lambda.is_some());
        let mut x = DVector::zeros(layout.n_vars);
        x.rows_mut(layout.v, layout.n_v).copy_from(&policy.vbar);
        let (nu, nw) = (policy.nu, policy.nw);
        for (s, b) in policy.m_blocks().iter().enumerate() {
            for a in 0..nu {
                for c in 0..nw {
                    x[layout.theta + (s * nu + a) * nw + c] = b[(a, c)];
                }
            }
        }
        x.rows_mut(layout.z0, z0.len()).copy_from(z0);
        if let (Some(l), Some(v)) = (layout.lambda, lambda) {
            x[l] = v;
        }
        x
    }

    /// Program objective for an arbitrary (not necessarily Toeplitz) policy.
    pub fn objective_at(&self, policy: &SadfPolicy, z0: &DVector<f64>, lambda: f64) -> Result<f64> {
        Ok(trace_cost(policy, z0, &self.config.model, &self.config.weights, &self.moment)?
            + self.config.lambda_penalty * lambda * lambda)
    }

    /// Slack of every tightened row; negative entries are violations.
    pub fn slacks(&self, policy: &SadfPolicy, nominal: &DVector<f64>) -> Vec<f64> {
        self.rows.iter().map(|r| r.slack(policy, nominal)).collect()
    }

    /// Largest violation of the step-`k+1` constraints by an arbitrary policy
    /// started at `z0 = z*_1` (`lambda = 1`).
    pub fn candidate_violation(&self, policy: &SadfPolicy, z0: &DVector<f64>) -> Result<f64> {
        let nominal = crate::prediction::nominal_trajectory(&self.config.model, z0, &policy.vbar)?;
        let mut v = self
            .slacks(policy, &nominal)
            .into_iter()
            .fold(0.0_f64, |acc, s| acc.max(-s));
        let nx = self.config.model.nx();
        let z_n = nominal.rows(self.config.model.horizon * nx, nx).into_owned();
        let term = &self.config.terminal;
        if term.alpha.is_finite() {
            v = v.max(linalg::quad_form(&term.p, &z_n).sqrt() - term.alpha.sqrt());
        }
        Ok(v)
    }

    fn solve_program(&self, program: &ConicProgram, step: usize) -> Result<(crate::conic::ConicSolution, bool)> {
        let tol = self.config.tolerance;
        let first = self.backend.solve(program, tol)?;
        let (sol, retried) = if first.status == SolveStatus::NumericalFailure {
            log::debug!("step {step}: numerical failure ({}), retrying", first.detail);
            (self.backend.solve(program, 10.0 * tol)?, true)
        } else {
            (first, false)
        };
        match sol.status {
            SolveStatus::Optimal => Ok((sol, retried)),
            SolveStatus::Infeasible if step == 0 => Err(DrmpcError::Initialization(sol.detail)),
            SolveStatus::Infeasible => Err(DrmpcError::Infeasible {
                step,
                detail: sol.detail,
            }),
            SolveStatus::NumericalFailure => Err(DrmpcError::NumericalFailure {
                step,
                detail: sol.detail,
            }),
        }
    }

    /// Solves at measured state `x` and returns the input to apply.
    pub fn step(
        &self,
        x: &DVector<f64>,
        state: Option<&ControllerState>,
    ) -> Result<(DVector<f64>, ControllerState, StepDiagnostics)> {
        let step = state.map_or(0, |s| s.step + 1);
        let program = self.build_problem(x, state)?;
        let (sol, retried) = self.solve_program(&program, step)?;
        let solved = self.unpack(&sol.x, state.is_some(), sol.objective)?;
        let u = applied_input(&solved.ef, x, &solved.z0);
        let candidate = shift_candidate(
            &solved.ef,
            &solved.nominal,
            &self.config.terminal.k,
            &self.config.model,
        )?;
        let tau = match state {
            Some(prev) if solved.lambda > LAMBDA_ZERO_TOL => prev.tau + 1,
            _ => 0,
        };
        let diagnostics = StepDiagnostics {
            step,
            lambda: solved.lambda,
            objective: solved.objective,
            status: sol.status,
            input: u.clone(),
            nominal: solved.nominal.clone(),
            slacks: self.slacks(&solved.sadf, &solved.nominal),
            tau,
            prediction_gap: (x - &solved.z0).norm(),
            iterations: sol.iterations,
            solve_time: sol.solve_time,
            retried,
        };
        if log::log_enabled!(log::Level::Trace) {
            if let Ok(line) = serde_json::to_string(&diagnostics) {
                log::trace!("{line}");
            }
        }
        let new_state = ControllerState {
            step,
            last: solved,
            candidate,
            tau,
        };
        Ok((u, new_state, diagnostics))
    }

    /// Cost-decrease check between the solve at `k` (in `prev`) and the
    /// program at `k+1` for measured state `next_x`.
    ///
    /// The candidate is the block-Toeplitz shift when it satisfies the
    /// step-`k+1` constraints, otherwise the shifted error-feedback policy.
    /// The bound is
    /// `J*(k) - ||z0||_Q^2 - ||g0||_R^2 + kappa tr(P E Sigma_hat E^T) + c`
    /// (the predicted initial error has zero covariance in the program).
    pub fn cost_decrease_check(&self, prev: &ControllerState, next_x: &DVector<f64>) -> Result<CostDecreaseCheck> {
        let model = &self.config.model;
        let nx = model.nx();
        let nu = model.nu();
        let last = &prev.last;
        let z0_next = prev.candidate.z0();

        let toeplitz = shift_toeplitz_candidate(&last.sadf, &last.nominal, &self.config.terminal.k, model)?;
        let toeplitz_violation = {
            let program = self.build_problem(next_x, Some(prev))?;
            program.max_violation(&self.pack(&toeplitz, &z0_next, Some(1.0)))
        };
        let admissible = toeplitz_violation <= 1e-9;
        let (candidate_objective, candidate_violation) = if admissible {
            (self.objective_at(&toeplitz, &z0_next, 1.0)?, toeplitz_violation)
        } else {
            let ef_sadf = crate::policy::ef_to_sadf(&prev.candidate.policy, model, &z0_next)?;
            (
                self.objective_at(&ef_sadf, &z0_next, 1.0)?,
                self.candidate_violation(&ef_sadf, &z0_next)?,
            )
        };

        let z0 = last.z0.clone();
        let g0 = last.ef.gbar.rows(0, nu).into_owned();
        debug_assert_eq!(z0.len(), nx);
        let growth = crate::cost::terminal_noise_cost(
            &self.config.weights.p,
            &model.sys,
            &self.moment.kappa_sigma(),
        );
        let bound = last.objective - self.config.weights.stage_cost(&z0, &g0) + growth + self.config.lambda_penalty;
        Ok(CostDecreaseCheck {
            candidate_objective,
            bound,
            residual: candidate_objective - bound,
            toeplitz_candidate: admissible,
            candidate_violation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ambiguity::AmbiguityCalibration;
    use crate::prediction::{build_stacked, LtiSystem};
    use crate::terminal::{terminal_halfspaces, TerminalIngredients};
    use crate::tightening::{lift_all, StageConstraint};

    fn setup(kappa: f64, level: f64, alpha: Option<f64>) -> ControllerConfig {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.5, 1.0]);
        let sys = LtiSystem::new(a, b, DMatrix::identity(2, 2)).unwrap();
        let model = build_stacked(&sys, 10).unwrap();
        let q = DMatrix::identity(2, 2) * 10.0;
        let r = DMatrix::identity(1, 1);
        let sigma_hat = EmpiricalCovariance::from_matrix(DMatrix::identity(2, 2) * 1e-4, 1000).unwrap();
        let constraints = vec![StageConstraint {
            kind: ConstraintKind::State,
            stage_range: None,
            normal: vec![0.0, -1.0],
            rhs: 1.0,
            probability: level,
            terminal: true,
        }];
        let specs = lift_all(&constraints, &model).unwrap();
        let ks = &sigma_hat.sigma_hat * kappa;
        let mut terminal =
            TerminalIngredients::synthesize(&sys, &q, &r, &ks, terminal_halfspaces(&constraints).unwrap()).unwrap();
        if let Some(al) = alpha {
            terminal = terminal.with_alpha(al).unwrap();
        }
        let weights = CostWeights::new(q, r, terminal.p.clone()).unwrap();
        let calib = AmbiguityCalibration { kappa, ..AmbiguityCalibration::exact_moments() };
        ControllerConfig {
            model,
            weights,
            calib,
            sigma_hat,
            constraints: specs,
            terminal,
            lambda_penalty: 1.0,
            tolerance: 1e-8,
        }
    }

    #[test]
    fn nominal_first_step_matches_trace_cost() {
        let ctrl = Controller::new(setup(3.4, 0.7, Some(0.5293))).unwrap();
        let x = DVector::from_vec(vec![6.0, 0.0]);
        let (u, st, diag) = ctrl.step(&x, None).unwrap();
        assert_eq!(diag.lambda, 0.0);
        assert!((&st.last.z0 - &x).norm() < 1e-9);
        let direct = ctrl.objective_at(&st.last.sadf, &st.last.z0, 0.0).unwrap();
        assert!((direct - st.last.objective).abs() < 1e-5 * direct.max(1.0), "{direct} vs {}", st.last.objective);
        assert!(diag.slacks.iter().all(|s| *s > -1e-6));
        assert!(u[0] < 0.0);
    }

    #[test]
    fn second_step_exposes_lambda_and_cost_decrease() {
        let ctrl = Controller::new(setup(3.4, 0.7, Some(0.5293))).unwrap();
        let x0 = DVector::from_vec(vec![6.0, 0.0]);
        let (u, st, _) = ctrl.step(&x0, None).unwrap();
        let w = DVector::from_vec(vec![0.01, -0.005]);
        let x1 = ctrl.config().model.sys.step(&x0, &u, &w);
        let check = ctrl.cost_decrease_check(&st, &x1).unwrap();
        let (_, st1, d1) = ctrl.step(&x1, Some(&st)).unwrap();
        assert!(d1.lambda >= 0.0 && d1.lambda <= 1.0);
        assert!(st1.last.objective <= check.candidate_objective + 1e-5);
        assert!(check.residual <= 1e-6, "{check:?}");
    }
}
