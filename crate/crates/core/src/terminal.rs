//! Terminal gain, weight, steady-state covariance and ellipsoidal terminal set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DrmpcError, Result};
use crate::linalg;
use crate::prediction::{check_len, LtiSystem};
use crate::tightening::{level_factor, ConstraintKind, StageConstraint};

pub const DARE_MAX_ITER: usize = 10_000;
pub const DARE_TOL: f64 = 1e-12;

/// Discrete algebraic Riccati equation by the structure-preserving doubling
/// algorithm. Returns `(K, P)` with `u = K x` and
/// `K = -(R + B^T P B)^{-1} B^T P A`.
pub fn synthesize_gain(sys: &LtiSystem, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let nx = sys.nx();
    check_len("Q size", nx, q.nrows())?;
    check_len("R size", sys.nu(), r.nrows())?;
    let r_inv = linalg::lu_inverse(r, "R")?;
    let mut a = sys.a.clone();
    let mut g = &sys.b * r_inv * sys.b.transpose();
    let mut h = q.clone();
    let eye = DMatrix::<f64>::identity(nx, nx);
    let mut residual = f64::INFINITY;
    let mut converged = false;
    for _ in 0..DARE_MAX_ITER {
        let w = linalg::lu_inverse(&(&eye + &g * &h), "I + G H")?;
        let wa = &w * &a;
        let a_next = &a * &wa;
        let g_next = &g + &a * &w * &g * a.transpose();
        let h_next = &h + a.transpose() * &h * &wa;
        residual = linalg::max_abs(&(&h_next - &h)) / linalg::max_abs(&h_next).max(1.0);
        a = a_next;
        g = linalg::symmetrize(&g_next);
        h = linalg::symmetrize(&h_next);
        if !residual.is_finite() {
            break;
        }
        if residual <= DARE_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(DrmpcError::RiccatiNoConvergence {
            iterations: DARE_MAX_ITER,
            residual,
        });
    }
    let p = h;
    let btp = sys.b.transpose() * &p;
    let k = -linalg::lu_inverse(&(r + &btp * &sys.b), "R + B^T P B")? * btp * &sys.a;
    let rho = linalg::spectral_radius(&(&sys.a + &sys.b * &k));
    if rho >= 1.0 {
        return Err(DrmpcError::UnstableClosedLoop(rho));
    }
    Ok((k, p))
}

/// `Sigma_inf = (A+BK) Sigma_inf (A+BK)^T + E (kappa Sigma_hat) E^T`.
pub fn steady_state_cov(sys: &LtiSystem, k: &DMatrix<f64>, kappa_sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let a_k = &sys.a + &sys.b * k;
    let w = linalg::symmetrize(&(&sys.e * kappa_sigma * sys.e.transpose()));
    linalg::discrete_lyapunov(&a_k, &w)
}

/// A terminal halfspace in state (`h^T z <= 1`) or input (`l^T K z <= 1`)
/// coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalHalfspace {
    pub kind: ConstraintKind,
    pub normal: DVector<f64>,
    pub level: f64,
    pub name: String,
}

impl TerminalHalfspace {
    /// Direction in state space: `h` or `K^T l`.
    pub fn direction(&self, k: &DMatrix<f64>) -> DVector<f64> {
        match self.kind {
            ConstraintKind::State => self.normal.clone(),
            ConstraintKind::Input => k.tr_mul(&self.normal),
        }
    }

    /// `1 - sqrt(p/(1-p)) sqrt(a^T Sigma_inf a)`.
    pub fn tightened_rhs(&self, k: &DMatrix<f64>, sigma_inf: &DMatrix<f64>) -> Result<f64> {
        let a = self.direction(k);
        let var = linalg::quad_form(sigma_inf, &a).max(0.0);
        Ok(1.0 - level_factor(self.level)? * var.sqrt())
    }
}

pub fn terminal_halfspaces(constraints: &[StageConstraint]) -> Result<Vec<TerminalHalfspace>> {
    constraints
        .iter()
        .enumerate()
        .filter(|(_, c)| c.terminal)
        .map(|(i, c)| {
            Ok(TerminalHalfspace {
                kind: c.kind,
                normal: c.scaled_normal()?,
                level: c.probability,
                name: format!("{:?} constraint {i}", c.kind).to_lowercase(),
            })
        })
        .collect()
}

/// Largest `alpha` such that `{z : z^T P z <= alpha}` satisfies every
/// tightened terminal halfspace:
/// `alpha = min_r rhs_r^2 / (a_r^T P^{-1} a_r)`. Returns infinity when there
/// are no halfspaces.
pub fn max_alpha(
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
    sigma_inf: &DMatrix<f64>,
    halfspaces: &[TerminalHalfspace],
) -> Result<f64> {
    let p_inv = linalg::lu_inverse(p, "P")?;
    let mut alpha = f64::INFINITY;
    for hs in halfspaces {
        let rhs = hs.tightened_rhs(k, sigma_inf)?;
        if rhs <= 0.0 {
            return Err(DrmpcError::TerminalSetEmpty {
                constraint: hs.name.clone(),
                rhs,
            });
        }
        let a = hs.direction(k);
        let support = linalg::quad_form(&p_inv, &a);
        if support > 0.0 {
            alpha = alpha.min(rhs * rhs / support);
        }
    }
    Ok(alpha)
}

/// `(A+BK)^T P (A+BK) <= P`, which makes every sublevel set of `z^T P z`
/// invariant for the terminal controller.
pub fn check_invariance(sys: &LtiSystem, k: &DMatrix<f64>, p: &DMatrix<f64>, alpha: f64) -> bool {
    if !(alpha > 0.0) {
        return false;
    }
    let a_k = &sys.a + &sys.b * k;
    let gap = p - a_k.transpose() * p * &a_k;
    linalg::min_eigenvalue_sym(&gap) >= -1e-10 * linalg::max_abs(p).max(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalIngredients {
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub sigma_inf: DMatrix<f64>,
    pub alpha: f64,
    pub halfspaces: Vec<TerminalHalfspace>,
}

impl TerminalIngredients {
    /// Riccati gain and weight, steady-state covariance under `kappa Sigma_hat`,
    /// and the largest admissible `alpha`.
    pub fn synthesize(
        sys: &LtiSystem,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
        kappa_sigma: &DMatrix<f64>,
        halfspaces: Vec<TerminalHalfspace>,
    ) -> Result<Self> {
        let (k, p) = synthesize_gain(sys, q, r)?;
        Self::from_gain(sys, k, p, kappa_sigma, halfspaces)
    }

    pub fn from_gain(
        sys: &LtiSystem,
        k: DMatrix<f64>,
        p: DMatrix<f64>,
        kappa_sigma: &DMatrix<f64>,
        halfspaces: Vec<TerminalHalfspace>,
    ) -> Result<Self> {
        let sigma_inf = steady_state_cov(sys, &k, kappa_sigma)?;
        let alpha = max_alpha(&p, &k, &sigma_inf, &halfspaces)?;
        if !check_invariance(sys, &k, &p, alpha) {
            return Err(DrmpcError::Model(
                "terminal set is not invariant under the terminal gain".into(),
            ));
        }
        Ok(TerminalIngredients {
            k,
            p,
            sigma_inf,
            alpha,
            halfspaces,
        })
    }

    /// Replaces `alpha` by a fixed value, e.g. to hold the terminal set
    /// constant across experiments.
    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(DrmpcError::param("alpha", "must be positive"));
        }
        self.alpha = alpha;
        Ok(self)
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        linalg::quad_form(&self.p, z) <= self.alpha + tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn double_integrator_sys() -> LtiSystem {
        LtiSystem::new(
            dmatrix![1.0, 1.0; 0.0, 1.0],
            dmatrix![0.5; 1.0],
            DMatrix::identity(2, 2),
        )
        .unwrap()
    }

    #[test]
    fn scalar_riccati_fixed_point() {
        let sys = LtiSystem::new(dmatrix![0.5], dmatrix![1.0], dmatrix![1.0]).unwrap();
        let (k, p) = synthesize_gain(&sys, &dmatrix![1.0], &dmatrix![1.0]).unwrap();
        // Oracle: iterate P <- Q + A^2 P R / (R + P).
        let mut x = 1.0;
        for _ in 0..200 {
            x = 1.0 + 0.25 * x / (1.0 + x);
        }
        assert!((p[(0, 0)] - x).abs() < 1e-12);
        assert!((k[(0, 0)] + 0.5 * x / (1.0 + x)).abs() < 1e-12);
    }

    #[test]
    fn riccati_pair_on_double_integrator() {
        let sys = double_integrator_sys();
        let q = DMatrix::identity(2, 2) * 10.0;
        let r = DMatrix::identity(1, 1);
        let (k, p) = synthesize_gain(&sys, &q, &r).unwrap();
        let a_k = &sys.a + &sys.b * &k;
        let res = &p - a_k.transpose() * &p * &a_k - &q - k.transpose() * &r * &k;
        assert!(linalg::max_abs(&res) < 1e-9);
        let printed = dmatrix![20.5988, 5.9161; 5.9161, 14.2284];
        assert!(linalg::max_abs(&(&p - printed)) < 1e-3);
        assert!(check_invariance(&sys, &k, &p, 1.0));
    }

    #[test]
    fn deadbeat_covariance_is_one_step() {
        // A + BK = 0 for A = diag(0.3, 0.7), B = I, K = -A.
        let sys = LtiSystem::new(
            dmatrix![0.3, 0.0; 0.0, 0.7],
            DMatrix::identity(2, 2),
            dmatrix![1.0, 0.0; 0.5, 1.0],
        )
        .unwrap();
        let k = -sys.a.clone();
        let ks = dmatrix![2.0, 0.1; 0.1, 1.0];
        let s = steady_state_cov(&sys, &k, &ks).unwrap();
        let expected = &sys.e * &ks * sys.e.transpose();
        assert!(linalg::max_abs(&(s - expected)) < 1e-14);
        assert!(check_invariance(&sys, &k, &DMatrix::identity(2, 2), 1.0));
    }

    #[test]
    fn alpha_untightened_support() {
        let p = dmatrix![2.0, 0.5; 0.5, 1.0];
        let hs = vec![TerminalHalfspace {
            kind: ConstraintKind::State,
            normal: DVector::from_vec(vec![0.0, 1.0]),
            level: 0.9,
            name: "x2".into(),
        }];
        let k = dmatrix![0.0, 0.0];
        let alpha = max_alpha(&p, &k, &DMatrix::zeros(2, 2), &hs).unwrap();
        let p_inv = p.try_inverse().unwrap();
        assert!((alpha - 1.0 / p_inv[(1, 1)]).abs() < 1e-14);
    }

    #[test]
    fn empty_terminal_set_is_reported() {
        let hs = vec![TerminalHalfspace {
            kind: ConstraintKind::State,
            normal: DVector::from_vec(vec![0.0, 1.0]),
            level: 0.9,
            name: "x2".into(),
        }];
        let err = max_alpha(&DMatrix::identity(2, 2), &dmatrix![0.0, 0.0], &(DMatrix::identity(2, 2) * 0.2), &hs);
        assert!(matches!(err, Err(DrmpcError::TerminalSetEmpty { .. })));
    }

    #[test]
    fn unstable_gain_fails_invariance() {
        let sys = double_integrator_sys();
        let k = dmatrix![1.0, 1.0];
        assert!(!check_invariance(&sys, &k, &DMatrix::identity(2, 2), 1.0));
    }
}
