//! Closed-loop Monte-Carlo simulation, experiment recipes and result output.
//!
//! Seeds: run `i` of an experiment with master seed `s` draws its
//! disturbances from `ChaCha8Rng::seed_from_u64(child_seed(s, i))`, where
//! `child_seed` is one splitmix64 step on `s + (i + 1) * 0x9E3779B97F4A7C15`.
//! Calibration samples come from a separate stream keyed by the master seed
//! (nested mode) or by the master seed and the sample count (fresh mode).
//! Every configuration of a sweep reuses the same per-run seeds.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ambiguity::{
    calibrate, calibrate_with_epsilon, estimate_covariance, AmbiguityCalibration, EmpiricalCovariance,
    SubGaussianSpec,
};
use crate::conic::DEFAULT_TOLERANCE;
use crate::controller::{Controller, ControllerConfig, ControllerState, CostDecreaseCheck};
use crate::cost::CostWeights;
use crate::error::{DrmpcError, Result};
use crate::linalg;
use crate::prediction::{build_stacked, LtiSystem, StackedModel};
use crate::terminal::{
    check_invariance, max_alpha, steady_state_cov, synthesize_gain, terminal_halfspaces, TerminalIngredients,
};
use crate::tightening::{lift_all, ConstraintKind, StageConstraint};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const CALIBRATION_TAG: u64 = 0xC0FF_EE00_5EED_0001;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn child_seed(master: u64, run: usize) -> u64 {
    splitmix64(master.wrapping_add((run as u64 + 1).wrapping_mul(GOLDEN)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Independent sample set per sample size.
    Fresh,
    /// Sample sets are prefixes of one stream, so larger sets contain smaller ones.
    #[default]
    Nested,
}

/// A larger disturbance with covariance `multiplier * Sigma_true` that
/// lands in `x(step)`, i.e. `x(step) = A x(step-1) + B u(step-1) + E w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnmodeledDisturbance {
    pub step: usize,
    pub multiplier: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalConfig {
    /// Fixed terminal level, used for every configuration of an experiment.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Otherwise compute alpha from a calibration with this many samples;
    /// if both are absent each configuration uses its own calibration.
    #[serde(default)]
    pub alpha_samples: Option<usize>,
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

/// Scenario file. Matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub e: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub horizon: usize,
    /// Simulation length `T`; the cost sums stages `1..=T`.
    pub steps: usize,
    pub x0: Vec<f64>,
    /// Covariance of the true Gaussian disturbance.
    pub sigma_true: Vec<Vec<f64>>,
    pub runs: usize,
    pub seed: u64,
    pub beta: f64,
    /// Variance proxy of the whitened disturbance.
    pub sigma2: f64,
    /// Fixed epsilon; optimized when absent.
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Sample size for single-configuration commands.
    pub n_samples: usize,
    /// Sample-size sweep of the cost curve.
    #[serde(default)]
    pub sample_sizes: Vec<usize>,
    /// Sample sizes of the satisfaction table; `sample_sizes` when empty.
    #[serde(default)]
    pub table_sizes: Vec<usize>,
    #[serde(default)]
    pub sampling: SamplingMode,
    pub constraints: Vec<StageConstraint>,
    /// State-constraint probability levels swept by the sample-size table.
    #[serde(default)]
    pub levels: Vec<f64>,
    #[serde(default)]
    pub lambda_penalty: f64,
    #[serde(default)]
    pub penalties: Vec<f64>,
    #[serde(default)]
    pub terminal: TerminalConfig,
    #[serde(default)]
    pub unmodeled: Option<UnmodeledDisturbance>,
    /// Step whose satisfaction rate the penalty table reports.
    #[serde(default)]
    pub report_step: Option<usize>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(DrmpcError::Config("steps must be >= 1".into()));
        }
        if self.runs < 1 {
            return Err(DrmpcError::Config("runs must be >= 1".into()));
        }
        if self.horizon < 1 {
            return Err(DrmpcError::Config("horizon must be >= 1".into()));
        }
        let sigma = linalg::from_rows(&self.sigma_true)?;
        EmpiricalCovariance::from_matrix(sigma, 1)?;
        if self.constraints.is_empty() {
            log::warn!("scenario has no constraints");
        }
        for c in &self.penalties {
            if !(*c >= 0.0) {
                return Err(DrmpcError::Config(format!("negative lambda penalty {c}")));
            }
        }
        if let Some(u) = &self.unmodeled {
            if u.step == 0 || u.step > self.steps {
                return Err(DrmpcError::Config(format!(
                    "unmodeled disturbance step {} outside 1..={}",
                    u.step, self.steps
                )));
            }
            if !(u.multiplier >= 0.0) {
                return Err(DrmpcError::Config("unmodeled multiplier must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// One controller configuration of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSetup {
    pub calib: AmbiguityCalibration,
    pub sigma_hat: EmpiricalCovariance,
    /// Overrides the probability of every state constraint.
    pub level: Option<f64>,
    pub lambda_penalty: f64,
}

/// Scenario with its system data assembled.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub sys: LtiSystem,
    pub model: StackedModel,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub sigma_true: DMatrix<f64>,
    sigma_true_factor: DMatrix<f64>,
    pub sub_gaussian: SubGaussianSpec,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let sys = LtiSystem::new(
            linalg::from_rows(&config.a)?,
            linalg::from_rows(&config.b)?,
            linalg::from_rows(&config.e)?,
        )?;
        let model = build_stacked(&sys, config.horizon)?;
        let q = linalg::from_rows(&config.q)?;
        let r = linalg::from_rows(&config.r)?;
        let (gain, p) = synthesize_gain(&sys, &q, &r)?;
        let x0 = DVector::from_vec(config.x0.clone());
        if x0.len() != sys.nx() {
            return Err(DrmpcError::DimensionMismatch {
                context: "x0",
                expected: sys.nx(),
                got: x0.len(),
            });
        }
        let sigma_true = linalg::from_rows(&config.sigma_true)?;
        if sigma_true.nrows() != sys.nw() {
            return Err(DrmpcError::DimensionMismatch {
                context: "sigma_true size",
                expected: sys.nw(),
                got: sigma_true.nrows(),
            });
        }
        let sigma_true_factor = linalg::psd_factor(&sigma_true, 0.0, "sigma_true")?;
        let sub_gaussian = SubGaussianSpec::new(config.sigma2, sys.nw())?;
        Ok(Scenario {
            config,
            sys,
            model,
            q,
            r,
            gain,
            p,
            x0,
            sigma_true,
            sigma_true_factor,
            sub_gaussian,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(ScenarioConfig::load(path)?)
    }

    fn gaussian(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let n = DVector::from_fn(self.sys.nw(), |_, _| StandardNormal.sample(rng));
        &self.sigma_true_factor * n
    }

    /// Calibration samples for `n` (see the module docs for the streams).
    pub fn calibration_samples(&self, n: usize) -> Vec<DVector<f64>> {
        let key = match self.config.sampling {
            SamplingMode::Nested => splitmix64(self.config.seed ^ CALIBRATION_TAG),
            SamplingMode::Fresh => {
                splitmix64(splitmix64(self.config.seed ^ CALIBRATION_TAG) ^ n as u64)
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        (0..n).map(|_| self.gaussian(&mut rng)).collect()
    }

    pub fn empirical_covariance(&self, n: usize) -> Result<EmpiricalCovariance> {
        estimate_covariance(&self.calibration_samples(n))
    }

    pub fn calibration(&self, n: usize) -> Result<AmbiguityCalibration> {
        match self.config.epsilon {
            Some(eps) => calibrate_with_epsilon(self.config.beta, eps, &self.sub_gaussian, n),
            None => calibrate(self.config.beta, &self.sub_gaussian, n),
        }
    }

    /// Data-driven setup from `n` samples with the scenario's own level and penalty.
    pub fn setup(&self, n: usize) -> Result<ControllerSetup> {
        Ok(ControllerSetup {
            calib: self.calibration(n)?,
            sigma_hat: self.empirical_covariance(n)?,
            level: None,
            lambda_penalty: self.config.lambda_penalty,
        })
    }

    /// Exact-moment setup: `Sigma_hat = Sigma_true`, `kappa = 1`.
    pub fn exact_setup(&self) -> Result<ControllerSetup> {
        Ok(ControllerSetup {
            calib: AmbiguityCalibration::exact_moments(),
            sigma_hat: EmpiricalCovariance::from_matrix(self.sigma_true.clone(), usize::MAX)?,
            level: None,
            lambda_penalty: self.config.lambda_penalty,
        })
    }

    pub fn constraints(&self, level: Option<f64>) -> Vec<StageConstraint> {
        self.config
            .constraints
            .iter()
            .map(|c| {
                let mut c = c.clone();
                if let (Some(p), ConstraintKind::State) = (level, c.kind) {
                    c.probability = p;
                }
                c
            })
            .collect()
    }

    /// Largest terminal level for a given calibration.
    pub fn alpha_for(&self, calib: &AmbiguityCalibration, sigma_hat: &EmpiricalCovariance, level: Option<f64>) -> Result<f64> {
        let ks = &sigma_hat.sigma_hat * calib.kappa;
        let sigma_inf = steady_state_cov(&self.sys, &self.gain, &ks)?;
        let hs = terminal_halfspaces(&self.constraints(level))?;
        max_alpha(&self.p, &self.gain, &sigma_inf, &hs)
    }

    pub fn terminal(&self, setup: &ControllerSetup) -> Result<TerminalIngredients> {
        let ks = &setup.sigma_hat.sigma_hat * setup.calib.kappa;
        let sigma_inf = steady_state_cov(&self.sys, &self.gain, &ks)?;
        let halfspaces = terminal_halfspaces(&self.constraints(setup.level))?;
        let alpha = match (self.config.terminal.alpha, self.config.terminal.alpha_samples) {
            (Some(alpha), _) => alpha,
            (None, Some(n)) => {
                let calib = self.calibration(n)?;
                self.alpha_for(&calib, &self.empirical_covariance(n)?, setup.level)?
            }
            (None, None) => max_alpha(&self.p, &self.gain, &sigma_inf, &halfspaces)?,
        };
        if !check_invariance(&self.sys, &self.gain, &self.p, alpha) {
            return Err(DrmpcError::Model("terminal set is not invariant".into()));
        }
        Ok(TerminalIngredients {
            k: self.gain.clone(),
            p: self.p.clone(),
            sigma_inf,
            alpha,
            halfspaces,
        })
    }

    pub fn controller(&self, setup: &ControllerSetup) -> Result<Controller> {
        let constraints = lift_all(&self.constraints(setup.level), &self.model)?;
        let config = ControllerConfig {
            model: self.model.clone(),
            weights: CostWeights::new(self.q.clone(), self.r.clone(), self.p.clone())?,
            calib: setup.calib,
            sigma_hat: setup.sigma_hat.clone(),
            constraints,
            terminal: self.terminal(setup)?,
            lambda_penalty: setup.lambda_penalty,
            tolerance: self.config.tolerance,
        };
        Controller::new(config)
    }

    /// Disturbance driving `x(k)`; always consumes the same draws so that
    /// runs with different controllers see common random numbers.
    fn disturbance(&self, rng: &mut ChaCha8Rng, k: usize) -> DVector<f64> {
        let w = self.gaussian(rng);
        match self.config.unmodeled {
            Some(u) if u.step == k => w * u.multiplier.sqrt(),
            _ => w,
        }
    }

    /// Whether `x(k)`, `u(k)` violate any configured constraint.
    pub fn violated(&self, x: &DVector<f64>, u: &DVector<f64>) -> bool {
        self.config.constraints.iter().any(|c| {
            let a = DVector::from_vec(c.normal.clone());
            match c.kind {
                ConstraintKind::State => a.dot(x) > c.rhs,
                ConstraintKind::Input => a.dot(u) > c.rhs,
            }
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Evaluate the cost-decrease certificate before every solve at `k >= 1`.
    pub check_cost_decrease: bool,
}

/// Cost-decrease certificate between solves `k - 1` and `k`, with the
/// optimal objective actually reached at `k`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CostDecreaseRecord {
    pub step: usize,
    pub check: CostDecreaseCheck,
    pub optimal: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    /// `x(0..=T)`.
    pub states: Vec<Vec<f64>>,
    /// `u(0..=T)`.
    pub inputs: Vec<Vec<f64>>,
    pub lambdas: Vec<f64>,
    pub taus: Vec<usize>,
    pub objectives: Vec<f64>,
    /// `sum_{k=1}^{T} ||x(k)||_Q^2 + ||u(k)||_R^2`.
    pub cost: f64,
    /// Violation indicator for `k = 1..=T` (index `k - 1`).
    pub violated: Vec<bool>,
    pub cost_decrease: Vec<CostDecreaseRecord>,
    pub shortcut_solves: usize,
    #[serde(skip)]
    pub solve_time: Duration,
}

pub fn run_closed_loop(
    scenario: &Scenario,
    controller: &Controller,
    run: usize,
    seed: u64,
    options: RunOptions,
) -> Result<RunRecord> {
    let t_final = scenario.config.steps;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = scenario.x0.clone();
    let mut state: Option<ControllerState> = None;
    let mut rec = RunRecord {
        run,
        seed,
        states: Vec::with_capacity(t_final + 1),
        inputs: Vec::with_capacity(t_final + 1),
        lambdas: Vec::with_capacity(t_final + 1),
        taus: Vec::with_capacity(t_final + 1),
        objectives: Vec::with_capacity(t_final + 1),
        cost: 0.0,
        violated: Vec::with_capacity(t_final),
        cost_decrease: Vec::new(),
        shortcut_solves: 0,
        solve_time: Duration::ZERO,
    };
    let wrap = |step: usize| {
        move |e: DrmpcError| DrmpcError::Run {
            run,
            seed,
            step,
            source: Box::new(e),
        }
    };
    for k in 0..=t_final {
        let check = match (&state, options.check_cost_decrease) {
            (Some(prev), true) => Some(controller.cost_decrease_check(prev, &x).map_err(wrap(k))?),
            _ => None,
        };
        let (u, next, diag) = controller.step(&x, state.as_ref()).map_err(wrap(k))?;
        if let Some(check) = check {
            rec.cost_decrease.push(CostDecreaseRecord {
                step: k,
                check,
                optimal: diag.objective,
            });
        }
        if k >= 1 {
            rec.cost += controller.config().weights.stage_cost(&x, &u);
            rec.violated.push(scenario.violated(&x, &u));
        }
        rec.shortcut_solves += (diag.iterations == 0) as usize;
        rec.solve_time += diag.solve_time;
        rec.states.push(x.as_slice().to_vec());
        rec.inputs.push(u.as_slice().to_vec());
        rec.lambdas.push(diag.lambda);
        rec.taus.push(diag.tau);
        rec.objectives.push(diag.objective);
        if k < t_final {
            let w = scenario.disturbance(&mut rng, k + 1);
            x = scenario.sys.step(&x, &u, &w);
        }
        state = Some(next);
    }
    Ok(rec)
}

pub const LAMBDA_BINS: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub runs: Vec<RunRecord>,
    pub mean_cost: f64,
    pub cost_stderr: f64,
    /// Satisfaction frequency of step `k` at index `k - 1`.
    pub step_satisfaction: Vec<f64>,
    /// Minimum over `k` of the per-step satisfaction frequency.
    pub worst_case_rate: f64,
    pub worst_case_step: usize,
    /// Conditioning age of the solve that planned `x(k)` (the solve at
    /// `k - 1`) mapped to `(steps, violations)`.
    pub tau_strata: BTreeMap<usize, (usize, usize)>,
    pub lambda_histogram: [usize; LAMBDA_BINS],
    /// Frequency of `lambda > 0.1` over all solves at `k >= 1`.
    pub lambda_active_fraction: f64,
    pub shortcut_fraction: f64,
    #[serde(skip)]
    pub mean_solve_time: Duration,
    #[serde(skip)]
    pub max_run_solve_time: Duration,
}

impl SimulationReport {
    pub fn from_runs(runs: Vec<RunRecord>) -> Self {
        let n = runs.len().max(1) as f64;
        let mean_cost = runs.iter().map(|r| r.cost).sum::<f64>() / n;
        let var = if runs.len() > 1 {
            runs.iter().map(|r| (r.cost - mean_cost).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let steps = runs.first().map_or(0, |r| r.violated.len());
        let step_satisfaction: Vec<f64> = (0..steps)
            .map(|k| runs.iter().filter(|r| !r.violated[k]).count() as f64 / n)
            .collect();
        let (worst_idx, worst_case_rate) = step_satisfaction
            .iter()
            .copied()
            .enumerate()
            .fold((0, 1.0), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
        let mut tau_strata = BTreeMap::new();
        let mut lambda_histogram = [0usize; LAMBDA_BINS];
        let mut active = 0usize;
        let mut solves = 0usize;
        let mut total_solves = 0usize;
        let mut shortcut = 0usize;
        let mut solve_time = Duration::ZERO;
        let mut max_run_solve_time = Duration::ZERO;
        for r in &runs {
            for (k, v) in r.violated.iter().enumerate() {
                let e = tau_strata.entry(r.taus[k]).or_insert((0, 0));
                e.0 += 1;
                e.1 += *v as usize;
            }
            for &l in &r.lambdas[1..] {
                let bin = ((l * LAMBDA_BINS as f64) as usize).min(LAMBDA_BINS - 1);
                lambda_histogram[bin] += 1;
                active += (l > 0.1) as usize;
                solves += 1;
            }
            total_solves += r.lambdas.len();
            shortcut += r.shortcut_solves;
            solve_time += r.solve_time;
            max_run_solve_time = max_run_solve_time.max(r.solve_time);
        }
        SimulationReport {
            mean_cost,
            cost_stderr: (var / n).sqrt(),
            step_satisfaction,
            worst_case_rate,
            worst_case_step: worst_idx + 1,
            tau_strata,
            lambda_histogram,
            lambda_active_fraction: active as f64 / solves.max(1) as f64,
            shortcut_fraction: shortcut as f64 / total_solves.max(1) as f64,
            mean_solve_time: solve_time / total_solves.max(1) as u32,
            max_run_solve_time,
            runs,
        }
    }

    /// Satisfaction frequency at step `k >= 1`.
    pub fn satisfaction_at(&self, k: usize) -> Option<f64> {
        k.checked_sub(1).and_then(|i| self.step_satisfaction.get(i).copied())
    }
}

/// Runs `runs` closed loops in parallel; results are ordered by run index.
pub fn monte_carlo(
    scenario: &Scenario,
    controller: &Controller,
    runs: usize,
    master_seed: u64,
    options: RunOptions,
) -> Result<SimulationReport> {
    let records = (0..runs)
        .into_par_iter()
        .map(|i| run_closed_loop(scenario, controller, i, child_seed(master_seed, i), options))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulationReport::from_runs(records))
}

/// One row of every sweep output (see the README for the CSV schema).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub level: f64,
    pub n_samples: Option<usize>,
    pub kappa: f64,
    pub lambda_penalty: f64,
    pub alpha: f64,
    pub runs: usize,
    /// False when the first problem is infeasible from `x0`; the metrics
    /// are then NaN.
    pub feasible: bool,
    pub mean_cost: f64,
    pub cost_stderr: f64,
    pub worst_case_rate: f64,
    pub worst_case_step: usize,
    pub report_step: Option<usize>,
    pub report_satisfaction: Option<f64>,
    pub lambda_active_fraction: f64,
}

impl Scenario {
    fn state_level(&self) -> f64 {
        self.config
            .constraints
            .iter()
            .find(|c| c.kind == ConstraintKind::State)
            .map_or(f64::NAN, |c| c.probability)
    }

    /// Runs one configuration and summarizes it.
    pub fn evaluate(&self, label: &str, setup: &ControllerSetup, runs: usize) -> Result<(SweepRow, SimulationReport)> {
        let controller = self.controller(setup)?;
        let report = monte_carlo(self, &controller, runs, self.config.seed, RunOptions::default())?;
        let report_step = self.config.report_step;
        let row = SweepRow {
            label: label.to_string(),
            level: setup.level.unwrap_or_else(|| self.state_level()),
            n_samples: (setup.calib.n_samples != usize::MAX).then_some(setup.calib.n_samples),
            kappa: setup.calib.kappa,
            lambda_penalty: setup.lambda_penalty,
            alpha: controller.config().terminal.alpha,
            runs,
            feasible: true,
            mean_cost: report.mean_cost,
            cost_stderr: report.cost_stderr,
            worst_case_rate: report.worst_case_rate,
            worst_case_step: report.worst_case_step,
            report_step,
            report_satisfaction: report_step.and_then(|k| report.satisfaction_at(k)),
            lambda_active_fraction: report.lambda_active_fraction,
        };
        log::info!(
            "{label}: level {:.2} N_s {:?} c {} -> cost {:.3} worst-case rate {:.4}",
            row.level,
            row.n_samples,
            row.lambda_penalty,
            row.mean_cost,
            row.worst_case_rate
        );
        Ok((row, report))
    }

    /// Like [`Scenario::evaluate`], but a configuration whose first problem
    /// is infeasible yields a row marked infeasible instead of an error. The
    /// first solve sees no noise, so every run would fail the same way.
    pub fn sweep_row(&self, label: &str, setup: &ControllerSetup, runs: usize) -> Result<SweepRow> {
        match self.evaluate(label, setup, runs) {
            Ok((row, _)) => Ok(row),
            Err(DrmpcError::Run { step: 0, source, .. }) if matches!(*source, DrmpcError::Initialization(_)) => {
                log::warn!(
                    "{label}: level {:?} N_s {} c {} infeasible at x0: {source}",
                    setup.level,
                    setup.calib.n_samples,
                    setup.lambda_penalty
                );
                Ok(SweepRow {
                    label: label.to_string(),
                    level: setup.level.unwrap_or_else(|| self.state_level()),
                    n_samples: (setup.calib.n_samples != usize::MAX).then_some(setup.calib.n_samples),
                    kappa: setup.calib.kappa,
                    lambda_penalty: setup.lambda_penalty,
                    alpha: self.terminal(setup)?.alpha,
                    runs,
                    feasible: false,
                    mean_cost: f64::NAN,
                    cost_stderr: f64::NAN,
                    worst_case_rate: f64::NAN,
                    worst_case_step: 0,
                    report_step: self.config.report_step,
                    report_satisfaction: None,
                    lambda_active_fraction: f64::NAN,
                })
            }
            Err(e) => Err(e),
        }
    }

    /// Sample-size sweep at one level.
    pub fn sweep_ns(&self, sizes: &[usize], level: Option<f64>, runs: usize) -> Result<Vec<SweepRow>> {
        sizes
            .iter()
            .map(|&n| {
                let setup = ControllerSetup {
                    level,
                    ..self.setup(n)?
                };
                self.sweep_row("data-driven", &setup, runs)
            })
            .collect()
    }

    /// Penalty sweep at the scenario's sample size.
    pub fn sweep_c(&self, penalties: &[f64], n_samples: usize, level: Option<f64>, runs: usize) -> Result<Vec<SweepRow>> {
        let base = self.setup(n_samples)?;
        penalties
            .iter()
            .map(|&c| {
                let setup = ControllerSetup {
                    level,
                    lambda_penalty: c,
                    ..base.clone()
                };
                self.sweep_row("penalty", &setup, runs)
            })
            .collect()
    }
}

/// Worst-case satisfaction for every (level, sample size) pair.
pub fn table1_experiment(scenario: &Scenario, levels: &[f64], sizes: &[usize], runs: usize) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &p in levels {
        rows.extend(scenario.sweep_ns(sizes, Some(p), runs)?);
    }
    Ok(rows)
}

/// Cost and satisfaction at the report step for each lambda penalty.
pub fn table2_experiment(scenario: &Scenario, penalties: &[f64], runs: usize) -> Result<Vec<SweepRow>> {
    if scenario.config.unmodeled.is_none() {
        return Err(DrmpcError::Config("penalty table needs an unmodeled disturbance".into()));
    }
    scenario.sweep_c(penalties, scenario.config.n_samples, None, runs)
}

/// Cost along the sample-size sweep plus the exact-moment baseline (last row).
pub fn fig1_experiment(scenario: &Scenario, sizes: &[usize], level: Option<f64>, runs: usize) -> Result<Vec<SweepRow>> {
    let mut rows = scenario.sweep_ns(sizes, level, runs)?;
    let exact = ControllerSetup {
        level,
        ..scenario.exact_setup()?
    };
    rows.push(scenario.sweep_row("exact-moments", &exact, runs)?);
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

pub fn write_rows<T: Serialize, W: Write>(rows: &[T], format: OutputFormat, out: W) -> Result<()> {
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        OutputFormat::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, rows)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Per-step trajectory rows of a report:
/// `run,seed,k,x1..xn,u1..um,lambda,tau,violated`.
pub fn write_trajectories<W: Write>(report: &SimulationReport, format: OutputFormat, out: W) -> Result<()> {
    #[derive(Serialize)]
    struct Step<'a> {
        run: usize,
        seed: u64,
        k: usize,
        x: &'a [f64],
        u: &'a [f64],
        lambda: f64,
        tau: usize,
        violated: bool,
    }
    let steps = report.runs.iter().flat_map(|r| {
        (0..r.states.len()).map(move |k| Step {
            run: r.run,
            seed: r.seed,
            k,
            x: &r.states[k],
            u: &r.inputs[k],
            lambda: r.lambdas[k],
            tau: r.taus[k],
            violated: k >= 1 && r.violated[k - 1],
        })
    });
    match format {
        OutputFormat::Json => {
            let rows: Vec<Step> = steps.collect();
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, &rows)?;
            writeln!(out)?;
        }
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            let (nx, nu) = report
                .runs
                .first()
                .map_or((0, 0), |r| (r.states[0].len(), r.inputs[0].len()));
            let mut header = vec!["run".to_string(), "seed".into(), "k".into()];
            header.extend((1..=nx).map(|i| format!("x{i}")));
            header.extend((1..=nu).map(|i| format!("u{i}")));
            header.extend(["lambda".into(), "tau".into(), "violated".into()]);
            w.write_record(&header)?;
            for s in steps {
                let mut rec = vec![s.run.to_string(), s.seed.to_string(), s.k.to_string()];
                rec.extend(s.x.iter().chain(s.u).map(|v| format!("{v:e}")));
                rec.extend([format!("{:e}", s.lambda), s.tau.to_string(), (s.violated as u8).to_string()]);
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}
