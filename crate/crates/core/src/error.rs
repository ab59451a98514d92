use thiserror::Error;

pub type Result<T> = std::result::Result<T, DrmpcError>;

#[derive(Debug, Error)]
pub enum DrmpcError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty sample set")]
    EmptySamples,

    #[error("calibration infeasible: {n_samples} samples given but at least {required} are required")]
    CalibrationInfeasible { n_samples: usize, required: usize },

    #[error("model construction failed: {0}")]
    Model(String),

    #[error("policy transform failed: {0}")]
    Transform(String),

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:.3e}) in {context}")]
    NotPsd { context: &'static str, min_eig: f64 },

    #[error("closed loop is not Schur stable (spectral radius {0:.6})")]
    UnstableClosedLoop(f64),

    #[error("Riccati iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    RiccatiNoConvergence { iterations: usize, residual: f64 },

    #[error("terminal set is empty: constraint `{constraint}` has tightened right-hand side {rhs:.6}")]
    TerminalSetEmpty { constraint: String, rhs: f64 },

    #[error("constraint specification rejected: {0}")]
    Constraint(String),

    #[error("initial problem infeasible at k = 0 with lambda = 0: {0}")]
    Initialization(String),

    #[error("solver reported infeasibility at step {step}: {detail}")]
    Infeasible { step: usize, detail: String },

    #[error("solver numerical failure at step {step}: {detail}")]
    NumericalFailure { step: usize, detail: String },

    #[error("run {run} (seed {seed:#018x}) failed at step {step}: {source}")]
    Run {
        run: usize,
        seed: u64,
        step: usize,
        #[source]
        source: Box<DrmpcError>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DrmpcError {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        DrmpcError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
