//! Moment-based ambiguity set calibration.
//!
//! The ambiguity set contains every zero-mean distribution whose second
//! moment is dominated by `kappa * sigma_hat`. For sub-Gaussian disturbances
//! the scaling `kappa = 1 / (1 - gamma(N_s, beta / 2))` makes the set contain
//! the true distribution with confidence `1 - beta`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DrmpcError, Result};
use crate::linalg;

/// Golden-section bracket for the epsilon search.
pub const EPSILON_BRACKET: (f64, f64) = (1e-4, 0.5 - 1e-4);
/// Absolute tolerance of the golden-section search.
pub const EPSILON_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubGaussianSpec {
    /// Variance proxy of the whitened disturbance.
    pub sigma2: f64,
    /// Disturbance dimension `n_w`.
    pub dim: usize,
}

impl SubGaussianSpec {
    pub fn new(sigma2: f64, dim: usize) -> Result<Self> {
        let spec = SubGaussianSpec { sigma2, dim };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(DrmpcError::param("sigma2", format!("must be > 0, got {}", self.sigma2)));
        }
        if self.dim == 0 {
            return Err(DrmpcError::param("dim", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityCalibration {
    pub beta: f64,
    pub epsilon: f64,
    pub n_samples: usize,
    pub gamma: f64,
    pub kappa: f64,
}

impl AmbiguityCalibration {
    /// Calibration for exactly known second moments (`kappa = 1`).
    pub fn exact_moments() -> Self {
        AmbiguityCalibration {
            beta: 0.0,
            epsilon: 0.0,
            n_samples: usize::MAX,
            gamma: 0.0,
            kappa: 1.0,
        }
    }

    pub fn sqrt_kappa(&self) -> f64 {
        self.kappa.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCovariance {
    pub sigma_hat: DMatrix<f64>,
    pub n_samples: usize,
}

impl EmpiricalCovariance {
    /// Wraps a known covariance, e.g. the true one for exact-moment baselines.
    pub fn from_matrix(sigma_hat: DMatrix<f64>, n_samples: usize) -> Result<Self> {
        if sigma_hat.nrows() != sigma_hat.ncols() {
            return Err(DrmpcError::DimensionMismatch {
                context: "covariance (square)",
                expected: sigma_hat.nrows(),
                got: sigma_hat.ncols(),
            });
        }
        let asym = linalg::max_abs(&(&sigma_hat - sigma_hat.transpose()));
        if asym > 1e-12 * linalg::max_abs(&sigma_hat).max(1.0) {
            return Err(DrmpcError::param("sigma_hat", "not symmetric"));
        }
        let min_eig = linalg::min_eigenvalue_sym(&sigma_hat);
        if min_eig < -1e-12 {
            return Err(DrmpcError::NotPsd {
                context: "empirical covariance",
                min_eig,
            });
        }
        Ok(EmpiricalCovariance {
            sigma_hat,
            n_samples,
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma_hat.nrows()
    }

    /// `true` iff `sigma <= kappa * sigma_hat` in the PSD order.
    pub fn dominates(&self, sigma: &DMatrix<f64>, kappa: f64, tol: f64) -> bool {
        let gap = &self.sigma_hat * kappa - sigma;
        linalg::min_eigenvalue_sym(&gap) >= -tol
    }
}

/// Second-moment estimate `(1/N) sum w w^T` without mean subtraction; the
/// first moment is known to be zero.
pub fn estimate_covariance(samples: &[DVector<f64>]) -> Result<EmpiricalCovariance> {
    let first = samples.first().ok_or(DrmpcError::EmptySamples)?;
    let n = first.len();
    let mut acc = DMatrix::<f64>::zeros(n, n);
    for w in samples {
        if w.len() != n {
            return Err(DrmpcError::DimensionMismatch {
                context: "disturbance sample",
                expected: n,
                got: w.len(),
            });
        }
        acc.ger(1.0, w, w, 1.0);
    }
    acc /= samples.len() as f64;
    Ok(EmpiricalCovariance {
        sigma_hat: linalg::symmetrize(&acc),
        n_samples: samples.len(),
    })
}

fn check_beta(name: &'static str, beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(DrmpcError::param(name, format!("must lie in (0, 1), got {beta}")))
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon < 0.5 {
        Ok(())
    } else {
        Err(DrmpcError::param(
            "epsilon",
            format!("must lie in (0, 0.5), got {epsilon}"),
        ))
    }
}

fn c1(epsilon: f64, spec: &SubGaussianSpec) -> f64 {
    spec.sigma2 / (1.0 - 2.0 * epsilon)
}

fn c2(beta_arg: f64, epsilon: f64, spec: &SubGaussianSpec) -> f64 {
    spec.dim as f64 * (1.0 + 2.0 / epsilon).ln() + (2.0 / beta_arg).ln()
}

/// Concentration radius `gamma(N_s, beta_arg)`. Callers pass `beta / 2`
/// to obtain the radius used by `kappa`.
pub fn gamma(n_samples: usize, beta_arg: f64, epsilon: f64, spec: &SubGaussianSpec) -> Result<f64> {
    check_beta("beta_arg", beta_arg)?;
    check_epsilon(epsilon)?;
    spec.validate()?;
    if n_samples == 0 {
        return Err(DrmpcError::param("n_samples", "must be >= 1"));
    }
    let n = n_samples as f64;
    let c1 = c1(epsilon, spec);
    let c2 = c2(beta_arg, epsilon, spec);
    Ok(c1 * ((32.0 * c2 / n).sqrt() + 2.0 * c2 / n))
}

fn sample_bound_with(beta_arg: f64, epsilon: f64, spec: &SubGaussianSpec) -> f64 {
    let c1 = c1(epsilon, spec);
    let c2 = c2(beta_arg, epsilon, spec);
    2.0 * c1 * c2 * (8.0 * c1 + 4.0 * (4.0 * c1 * c1 + c1).sqrt() + 1.0)
}

/// Real-valued right-hand side of the sample-count condition, with the
/// confidence split `beta / 2` that makes `gamma(N_s, beta / 2) < 1`.
pub fn sample_bound(beta: f64, epsilon: f64, spec: &SubGaussianSpec) -> Result<f64> {
    check_beta("beta", beta)?;
    check_epsilon(epsilon)?;
    spec.validate()?;
    Ok(sample_bound_with(beta / 2.0, epsilon, spec))
}

/// Smallest sample count with `gamma(N_s, beta / 2) < 1`.
pub fn min_samples(beta: f64, epsilon: f64, spec: &SubGaussianSpec) -> Result<usize> {
    let bound = sample_bound(beta, epsilon, spec)?;
    let mut n = (bound.ceil() as usize).max(1);
    // The closed form is exact up to rounding; settle the boundary directly.
    while gamma(n, beta / 2.0, epsilon, spec)? >= 1.0 {
        n += 1;
    }
    while n > 1 && gamma(n - 1, beta / 2.0, epsilon, spec)? < 1.0 {
        n -= 1;
    }
    Ok(n)
}

/// Objective of the epsilon selection problem, with `c2` evaluated at the
/// confidence level `beta` itself.
pub fn epsilon_objective(beta: f64, epsilon: f64, spec: &SubGaussianSpec) -> Result<f64> {
    check_beta("beta", beta)?;
    check_epsilon(epsilon)?;
    spec.validate()?;
    Ok(sample_bound_with(beta, epsilon, spec))
}

/// Minimizes [`epsilon_objective`] over `(0, 0.5)` by golden-section search.
pub fn optimize_epsilon(beta: f64, spec: &SubGaussianSpec) -> Result<f64> {
    check_beta("beta", beta)?;
    spec.validate()?;
    let f = |e: f64| sample_bound_with(beta, e, spec);
    Ok(golden_section(f, EPSILON_BRACKET.0, EPSILON_BRACKET.1, EPSILON_TOL))
}

pub(crate) fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Calibration at the optimized epsilon.
pub fn calibrate(beta: f64, spec: &SubGaussianSpec, n_samples: usize) -> Result<AmbiguityCalibration> {
    let epsilon = optimize_epsilon(beta, spec)?;
    calibrate_with_epsilon(beta, epsilon, spec, n_samples)
}

/// Calibration at a caller-chosen epsilon.
pub fn calibrate_with_epsilon(
    beta: f64,
    epsilon: f64,
    spec: &SubGaussianSpec,
    n_samples: usize,
) -> Result<AmbiguityCalibration> {
    let required = min_samples(beta, epsilon, spec)?;
    if n_samples < required {
        return Err(DrmpcError::CalibrationInfeasible {
            n_samples,
            required,
        });
    }
    let gamma = gamma(n_samples, beta / 2.0, epsilon, spec)?;
    Ok(AmbiguityCalibration {
        beta,
        epsilon,
        n_samples,
        gamma,
        kappa: 1.0 / (1.0 - gamma),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_spec() -> SubGaussianSpec {
        SubGaussianSpec::new(1.0, 2).unwrap()
    }

    #[test]
    fn covariance_of_zero_samples_is_zero() {
        let s = vec![DVector::zeros(3); 5];
        let cov = estimate_covariance(&s).unwrap();
        assert_eq!(cov.sigma_hat, DMatrix::zeros(3, 3));
        assert_eq!(cov.n_samples, 5);
    }

    #[test]
    fn covariance_of_single_sample_is_outer_product() {
        let s = vec![DVector::from_vec(vec![1.0, 2.0])];
        let cov = estimate_covariance(&s).unwrap();
        assert_eq!(cov.sigma_hat, nalgebra::dmatrix![1.0, 2.0; 2.0, 4.0]);
    }

    #[test]
    fn covariance_errors() {
        assert!(matches!(estimate_covariance(&[]), Err(DrmpcError::EmptySamples)));
        let s = vec![DVector::zeros(2), DVector::zeros(3)];
        assert!(matches!(
            estimate_covariance(&s),
            Err(DrmpcError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gamma_rejects_bad_ranges() {
        let spec = reference_spec();
        assert!(gamma(10, 0.0, 0.1, &spec).is_err());
        assert!(gamma(10, 1.0, 0.1, &spec).is_err());
        assert!(gamma(10, 0.05, 0.5, &spec).is_err());
        assert!(gamma(10, 0.05, 0.0, &spec).is_err());
        assert!(SubGaussianSpec::new(0.0, 2).is_err());
        assert!(SubGaussianSpec::new(1.0, 0).is_err());
    }

    #[test]
    fn gamma_vanishes_for_many_samples() {
        let g = gamma(1_000_000_000_000, 0.025, 0.0428, &reference_spec()).unwrap();
        assert!(g < 1e-4, "gamma = {g}");
    }

    #[test]
    fn min_samples_reference_value() {
        assert_eq!(min_samples(0.05, 0.0428, &reference_spec()).unwrap(), 516);
    }

    #[test]
    fn min_samples_clamps_for_tiny_proxy() {
        let spec = SubGaussianSpec::new(1e-12, 2).unwrap();
        assert_eq!(min_samples(0.05, 0.1, &spec).unwrap(), 1);
    }

    #[test]
    fn calibrate_below_minimum_names_requirement() {
        let err = calibrate_with_epsilon(0.05, 0.0428, &reference_spec(), 300).unwrap_err();
        match err {
            DrmpcError::CalibrationInfeasible { required, .. } => assert_eq!(required, 516),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn kappa_approaches_one() {
        let c = calibrate(0.05, &reference_spec(), 10_000_000_000).unwrap();
        assert!(c.kappa >= 1.0 && c.kappa < 1.001);
    }

    #[test]
    fn golden_section_on_parabola() {
        let x = golden_section(|x| (x - 0.3) * (x - 0.3), 0.0, 1.0, 1e-9);
        assert!((x - 0.3).abs() < 1e-8);
    }
}
