//! Distributionally robust quadratic cost.
//!
//! The trace form is what the optimizer sees. The mean/variance split is a
//! second, independent evaluation used for diagnostics and the cost-decrease
//! check.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ambiguity::EmpiricalCovariance;
use crate::error::{DrmpcError, Result};
use crate::linalg;
use crate::policy::{ErrorFeedbackPolicy, SadfPolicy};
use crate::prediction::{check_len, LtiSystem, StackedModel};

/// Smallest eigenvalue accepted for the weights.
pub const PD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

impl CostWeights {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, p: DMatrix<f64>) -> Result<Self> {
        for (name, m) in [("Q", &q), ("R", &r), ("P", &p)] {
            if m.nrows() != m.ncols() || m.is_empty() {
                return Err(DrmpcError::param(name, "must be square and non-empty"));
            }
            if linalg::max_abs(&(m - m.transpose())) > 1e-12 * linalg::max_abs(m).max(1.0) {
                return Err(DrmpcError::Model(format!("{name} is not symmetric")));
            }
            let min_eig = linalg::min_eigenvalue_sym(m);
            if min_eig <= PD_TOL {
                return Err(DrmpcError::NotPsd {
                    context: "cost weight (positive definiteness required)",
                    min_eig,
                });
            }
        }
        if q.shape() != p.shape() {
            return Err(DrmpcError::DimensionMismatch {
                context: "P vs Q size",
                expected: q.nrows(),
                got: p.nrows(),
            });
        }
        Ok(CostWeights { q, r, p })
    }

    /// `Q_bar = diag(I_N (x) Q, P)`.
    pub fn q_bar(&self, horizon: usize) -> DMatrix<f64> {
        linalg::block_diag(&[&linalg::block_diag_repeat(&self.q, horizon), &self.p])
    }

    /// `R_bar = I_N (x) R`.
    pub fn r_bar(&self, horizon: usize) -> DMatrix<f64> {
        linalg::block_diag_repeat(&self.r, horizon)
    }

    /// `P - (A+BK)^T P (A+BK) - Q - K^T R K`.
    pub fn lyapunov_residual(&self, sys: &LtiSystem, k: &DMatrix<f64>) -> DMatrix<f64> {
        let a_k = &sys.a + &sys.b * k;
        linalg::symmetrize(&(&self.p - a_k.transpose() * &self.p * &a_k - &self.q - k.transpose() * &self.r * k))
    }

    pub fn check_lyapunov(&self, sys: &LtiSystem, k: &DMatrix<f64>, tol: f64) -> Result<()> {
        let min_eig = linalg::min_eigenvalue_sym(&self.lyapunov_residual(sys, k));
        if min_eig < -tol {
            return Err(DrmpcError::NotPsd {
                context: "terminal Lyapunov inequality residual",
                min_eig,
            });
        }
        Ok(())
    }

    /// `||z||_Q^2 + ||u||_R^2`.
    pub fn stage_cost(&self, z: &DVector<f64>, u: &DVector<f64>) -> f64 {
        linalg::quad_form(&self.q, z) + linalg::quad_form(&self.r, u)
    }
}

/// Worst-case second moment of `d = [w_bar; 1]`, namely `diag(kappa Sigma_hat_N, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseSecondMoment {
    pub kappa: f64,
    pub sigma_hat: DMatrix<f64>,
    /// `sqrt(kappa)` times a factor of `Sigma_hat`.
    pub factor: DMatrix<f64>,
}

impl WorstCaseSecondMoment {
    pub fn new(kappa: f64, sigma_hat: &EmpiricalCovariance) -> Result<Self> {
        if !(kappa >= 1.0) {
            return Err(DrmpcError::param("kappa", "must be >= 1"));
        }
        let s = linalg::psd_factor(&sigma_hat.sigma_hat, 1e-12, "empirical covariance")?;
        Ok(WorstCaseSecondMoment {
            kappa,
            sigma_hat: sigma_hat.sigma_hat.clone(),
            factor: s * kappa.sqrt(),
        })
    }

    /// `kappa Sigma_hat`.
    pub fn kappa_sigma(&self) -> DMatrix<f64> {
        &self.sigma_hat * self.kappa
    }

    /// The full matrix `diag(kappa I_N (x) Sigma_hat, 1)`.
    pub fn sigma_d(&self, horizon: usize) -> DMatrix<f64> {
        let one = DMatrix::from_element(1, 1, 1.0);
        linalg::block_diag(&[&linalg::block_diag_repeat(&self.kappa_sigma(), horizon), &one])
    }
}

/// `sum_j col_j^T W col_j` for the columns of `h`.
fn weighted_frobenius(w: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    (w * h).component_mul(h).sum()
}

/// Trace-form cost
/// `kappa ||Q_bar^(1/2) (B_bar M_bar + E_bar) S||_F^2 + ||z_bar||^2_Q_bar
///  + kappa ||R_bar^(1/2) M_bar S||_F^2 + ||v_bar||^2_R_bar`.
pub fn trace_cost(
    policy: &SadfPolicy,
    z0: &DVector<f64>,
    model: &StackedModel,
    weights: &CostWeights,
    moment: &WorstCaseSecondMoment,
) -> Result<f64> {
    check_len("v_bar", model.input_len(), policy.vbar.len())?;
    let n = model.horizon;
    let s = linalg::block_diag_repeat(&moment.factor, n);
    let z = crate::prediction::nominal_trajectory(model, z0, &policy.vbar)?;
    let qbar = weights.q_bar(n);
    let rbar = weights.r_bar(n);
    let h = (&model.bbar * &policy.mbar + &model.ebar) * &s;
    let f = &policy.mbar * &s;
    Ok(weighted_frobenius(&qbar, &h)
        + linalg::quad_form(&qbar, &z)
        + weighted_frobenius(&rbar, &f)
        + linalg::quad_form(&rbar, &policy.vbar))
}

/// Mean and variance parts of the cost of an EF policy.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanVarianceCost {
    pub mean: f64,
    pub variance: f64,
    /// Error covariances `Sigma^x_t`, `t = 0..N`.
    pub state_cov: Vec<DMatrix<f64>>,
    /// Input-deviation covariances `Sigma^u_t`, `t = 0..N-1`.
    pub input_cov: Vec<DMatrix<f64>>,
}

impl MeanVarianceCost {
    pub fn total(&self) -> f64 {
        self.mean + self.variance
    }
}

/// Mean part from the nominal trajectory and feedforward; variance part from
/// the error dynamics `e_{t+1} = A e_t + B sum_i K_bar[t, i] e_i + E w_t`
/// with `e_0` of second moment `sigma_x0` and `w_t` of second moment
/// `kappa_sigma`.
///
/// The errors are propagated jointly (the response of every `e_t` to
/// `(e_0, w_0, ..)` is tracked), so gains acting on older errors are handled
/// exactly. A deterministic initial error `e_0` is covered by passing
/// `sigma_x0 = e_0 e_0^T`.
pub fn mean_variance_cost(
    nominal: &DVector<f64>,
    ef: &ErrorFeedbackPolicy,
    weights: &CostWeights,
    kappa_sigma: &DMatrix<f64>,
    sys: &LtiSystem,
    sigma_x0: &DMatrix<f64>,
) -> Result<MeanVarianceCost> {
    let (nx, nu, nw) = (sys.nx(), sys.nu(), sys.nw());
    let n = ef.horizon();
    check_len("nominal trajectory", (n + 1) * nx, nominal.len())?;
    check_len("K_bar columns", (n + 1) * nx, ef.kbar.ncols())?;
    check_len("kappa Sigma size", nw, kappa_sigma.nrows())?;
    check_len("Sigma^x_0 size", nx, sigma_x0.nrows())?;

    let mut mean = 0.0;
    for t in 0..n {
        mean += weights.stage_cost(
            &nominal.rows(t * nx, nx).into_owned(),
            &ef.gbar.rows(t * nu, nu).into_owned(),
        );
    }
    mean += linalg::quad_form(&weights.p, &nominal.rows(n * nx, nx).into_owned());

    // Responses to xi = (e_0, w_0, .., w_{N-1}).
    let dim = nx + n * nw;
    let s0 = linalg::psd_factor(sigma_x0, 1e-12, "initial error second moment")?;
    let sw = linalg::psd_factor(kappa_sigma, 1e-12, "kappa Sigma")?;
    let mut scale = DMatrix::zeros(dim, dim);
    scale.view_mut((0, 0), (nx, nx)).copy_from(&s0);
    for t in 0..n {
        scale
            .view_mut((nx + t * nw, nx + t * nw), (nw, nw))
            .copy_from(&sw);
    }

    let mut resp: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
    let mut first = DMatrix::zeros(nx, dim);
    first.view_mut((0, 0), (nx, nx)).fill_with_identity();
    resp.push(first);
    let mut input_cov = Vec::with_capacity(n);
    let mut variance = 0.0;
    for t in 0..n {
        let mut du = DMatrix::zeros(nu, dim);
        for (i, r) in resp.iter().enumerate() {
            du += ef.kbar.view((t * nu, i * nx), (nu, nx)) * r;
        }
        let mut next = &sys.a * &resp[t] + &sys.b * &du;
        next.view_mut((0, nx + t * nw), (nx, nw)).copy_from(&sys.e);
        let du_s = &du * &scale;
        variance += weighted_frobenius(&weights.r, &du_s);
        input_cov.push(linalg::symmetrize(&(&du_s * du_s.transpose())));
        resp.push(next);
    }
    let mut state_cov = Vec::with_capacity(n + 1);
    for (t, r) in resp.iter().enumerate() {
        let rs = r * &scale;
        let w = if t < n { &weights.q } else { &weights.p };
        variance += weighted_frobenius(w, &rs);
        state_cov.push(linalg::symmetrize(&(&rs * rs.transpose())));
    }
    Ok(MeanVarianceCost {
        mean,
        variance,
        state_cov,
        input_cov,
    })
}

/// `tr(P E (kappa Sigma_hat) E^T)`, the per-step growth allowed by the
/// cost-decrease bound.
pub fn terminal_noise_cost(p: &DMatrix<f64>, sys: &LtiSystem, kappa_sigma: &DMatrix<f64>) -> f64 {
    (p * &sys.e * kappa_sigma * sys.e.transpose()).trace()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::sadf_to_ef;
    use crate::prediction::build_stacked;
    use nalgebra::dmatrix;

    fn setup(n: usize) -> (StackedModel, CostWeights) {
        let sys = LtiSystem::new(
            dmatrix![1.0, 1.0; 0.0, 1.0],
            dmatrix![0.5; 1.0],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let w = CostWeights::new(
            DMatrix::identity(2, 2) * 10.0,
            DMatrix::identity(1, 1),
            dmatrix![20.5988, 5.9161; 5.9161, 14.2284],
        )
        .unwrap();
        (build_stacked(&sys, n).unwrap(), w)
    }

    #[test]
    fn weights_must_be_positive_definite() {
        let bad = CostWeights::new(
            DMatrix::zeros(2, 2),
            DMatrix::identity(1, 1),
            DMatrix::identity(2, 2),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn zero_policy_cost_is_pure_disturbance() {
        let (m, w) = setup(4);
        let cov = EmpiricalCovariance::from_matrix(dmatrix![2e-4, 1e-5; 1e-5, 1e-4], 100).unwrap();
        let moment = WorstCaseSecondMoment::new(3.0, &cov).unwrap();
        let j = trace_cost(&SadfPolicy::zero(4, 1, 2), &DVector::zeros(2), &m, &w, &moment).unwrap();
        let sn = linalg::block_diag_repeat(&cov.sigma_hat, 4);
        let expected = 3.0 * (sn * m.ebar.transpose() * w.q_bar(4) * &m.ebar).trace();
        assert!((j - expected).abs() < 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn zero_covariance_gives_nominal_cost() {
        let (m, w) = setup(3);
        let cov = EmpiricalCovariance::from_matrix(DMatrix::zeros(2, 2), 1).unwrap();
        let moment = WorstCaseSecondMoment::new(5.0, &cov).unwrap();
        let p = SadfPolicy::from_blocks(
            DVector::from_vec(vec![-1.0, 0.5, 0.2]),
            &[dmatrix![1.0, 0.0], dmatrix![0.3, 0.3]],
            1,
            2,
        )
        .unwrap();
        let z0 = DVector::from_vec(vec![2.0, -1.0]);
        let j = trace_cost(&p, &z0, &m, &w, &moment).unwrap();
        let z = crate::prediction::nominal_trajectory(&m, &z0, &p.vbar).unwrap();
        let mut expected = linalg::quad_form(&w.p, &z.rows(6, 2).into_owned());
        for t in 0..3 {
            expected += w.stage_cost(&z.rows(2 * t, 2).into_owned(), &p.vbar.rows(t, 1).into_owned());
        }
        assert!((j - expected).abs() < 1e-10);
    }

    #[test]
    fn forms_agree_on_fixed_instance() {
        let (m, w) = setup(5);
        let cov = EmpiricalCovariance::from_matrix(dmatrix![1.0, 0.2; 0.2, 0.5], 10).unwrap();
        let moment = WorstCaseSecondMoment::new(2.0, &cov).unwrap();
        let p = SadfPolicy::from_blocks(
            DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0, 1.0]),
            &[dmatrix![-0.5, -0.9], dmatrix![0.1, 0.2], dmatrix![0.0, -0.1], dmatrix![0.05, 0.0]],
            1,
            2,
        )
        .unwrap();
        let z0 = DVector::from_vec(vec![1.0, 0.5]);
        let ef = sadf_to_ef(&p, &m).unwrap();
        let z = ef.nominal(&m, &z0).unwrap();
        let mv = mean_variance_cost(&z, &ef, &w, &moment.kappa_sigma(), &m.sys, &DMatrix::zeros(2, 2)).unwrap();
        let j = trace_cost(&p, &z0, &m, &w, &moment).unwrap();
        assert!((mv.total() - j).abs() < 1e-9 * j.max(1.0));
        for c in mv.state_cov.iter().chain(mv.input_cov.iter()) {
            assert!(linalg::min_eigenvalue_sym(c) > -1e-10);
        }
        assert_eq!(linalg::max_abs(&mv.state_cov[0]), 0.0);
    }

    #[test]
    fn variance_vanishes_without_noise() {
        let (m, w) = setup(3);
        let ef = sadf_to_ef(&SadfPolicy::zero(3, 1, 2), &m).unwrap();
        let z = ef.nominal(&m, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let mv = mean_variance_cost(&z, &ef, &w, &DMatrix::zeros(2, 2), &m.sys, &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(mv.variance, 0.0);
    }
}
