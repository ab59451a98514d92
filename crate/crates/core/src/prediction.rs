//! LTI plant and horizon-stacked prediction matrices.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DrmpcError, Result};
use crate::linalg;

/// Relative singular-value cutoff used for rank decisions and `pinv`.
pub const RANK_TOL: f64 = 1e-10;

/// `x(k+1) = A x(k) + B u(k) + E w(k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, e: DMatrix<f64>) -> Result<Self> {
        let nx = a.nrows();
        if a.ncols() != nx || nx == 0 {
            return Err(DrmpcError::Model("A must be square and non-empty".into()));
        }
        if b.nrows() != nx || b.ncols() == 0 {
            return Err(DrmpcError::DimensionMismatch {
                context: "B rows",
                expected: nx,
                got: b.nrows(),
            });
        }
        if e.nrows() != nx || e.ncols() == 0 {
            return Err(DrmpcError::DimensionMismatch {
                context: "E rows",
                expected: nx,
                got: e.nrows(),
            });
        }
        let rank = linalg::numerical_rank(&e, RANK_TOL);
        if rank < e.ncols() {
            return Err(DrmpcError::Model(format!(
                "E must have full column rank, numerical rank {rank} < {}",
                e.ncols()
            )));
        }
        let sys = LtiSystem { a, b, e };
        if !sys.is_stabilizable() {
            log::warn!("(A, B) is not stabilizable; synthesis may fail");
        }
        Ok(sys)
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn nw(&self) -> usize {
        self.e.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.e * w
    }

    /// PBH test: `rank [A - z I, B] = n_x` for every eigenvalue `|z| >= 1`.
    pub fn is_stabilizable(&self) -> bool {
        let nx = self.nx();
        let nu = self.nu();
        for z in self.a.complex_eigenvalues().iter() {
            if z.norm() < 1.0 - 1e-12 {
                continue;
            }
            let m = DMatrix::<Complex<f64>>::from_fn(nx, nx + nu, |i, j| {
                if j < nx {
                    let diag = if i == j { *z } else { Complex::new(0.0, 0.0) };
                    Complex::new(self.a[(i, j)], 0.0) - diag
                } else {
                    Complex::new(self.b[(i, j - nx)], 0.0)
                }
            });
            let sv = m.singular_values();
            let smax = sv.iter().cloned().fold(0.0, f64::max);
            let rank = sv.iter().filter(|s| **s > RANK_TOL * smax.max(1.0)).count();
            if rank < nx {
                return false;
            }
        }
        true
    }
}

/// Horizon-stacked predictions `x_bar = A_bar x0 + B_bar u_bar + E_bar w_bar`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedModel {
    pub sys: LtiSystem,
    pub horizon: usize,
    pub abar: DMatrix<f64>,
    pub bbar: DMatrix<f64>,
    pub ebar: DMatrix<f64>,
    pub ebar_pinv: DMatrix<f64>,
}

impl StackedModel {
    pub fn nx(&self) -> usize {
        self.sys.nx()
    }
    pub fn nu(&self) -> usize {
        self.sys.nu()
    }
    pub fn nw(&self) -> usize {
        self.sys.nw()
    }
    /// Length of the stacked state `(N+1) n_x`.
    pub fn state_len(&self) -> usize {
        (self.horizon + 1) * self.nx()
    }
    /// Length of the stacked input `N n_u`.
    pub fn input_len(&self) -> usize {
        self.horizon * self.nu()
    }
    /// Length of the stacked disturbance `N n_w`.
    pub fn dist_len(&self) -> usize {
        self.horizon * self.nw()
    }

    /// Stacked open-loop response to a given input and disturbance sequence.
    pub fn propagate(
        &self,
        x0: &DVector<f64>,
        ubar: &DVector<f64>,
        wbar: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        check_len("x0", self.nx(), x0.len())?;
        check_len("u_bar", self.input_len(), ubar.len())?;
        check_len("w_bar", self.dist_len(), wbar.len())?;
        Ok(&self.abar * x0 + &self.bbar * ubar + &self.ebar * wbar)
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(DrmpcError::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}

pub fn build_stacked(sys: &LtiSystem, horizon: usize) -> Result<StackedModel> {
    if horizon == 0 {
        return Err(DrmpcError::param("horizon", "must be >= 1"));
    }
    let (nx, nu, nw) = (sys.nx(), sys.nu(), sys.nw());
    let n = horizon;

    let mut powers = Vec::with_capacity(n + 1);
    powers.push(DMatrix::<f64>::identity(nx, nx));
    for k in 1..=n {
        let next = &sys.a * &powers[k - 1];
        powers.push(next);
    }
    let a_b: Vec<DMatrix<f64>> = powers.iter().map(|p| p * &sys.b).collect();
    let a_e: Vec<DMatrix<f64>> = powers.iter().map(|p| p * &sys.e).collect();

    let mut abar = DMatrix::zeros((n + 1) * nx, nx);
    let mut bbar = DMatrix::zeros((n + 1) * nx, n * nu);
    let mut ebar = DMatrix::zeros((n + 1) * nx, n * nw);
    for i in 0..=n {
        abar.view_mut((i * nx, 0), (nx, nx)).copy_from(&powers[i]);
        for j in 0..i {
            bbar.view_mut((i * nx, j * nu), (nx, nu))
                .copy_from(&a_b[i - 1 - j]);
            ebar.view_mut((i * nx, j * nw), (nx, nw))
                .copy_from(&a_e[i - 1 - j]);
        }
    }

    let (ebar_pinv, rank) = linalg::pinv(&ebar, RANK_TOL);
    if rank < n * nw {
        return Err(DrmpcError::Model(format!(
            "stacked E is rank deficient ({rank} < {})",
            n * nw
        )));
    }

    Ok(StackedModel {
        sys: sys.clone(),
        horizon,
        abar,
        bbar,
        ebar,
        ebar_pinv,
    })
}

/// Nominal trajectory `z_bar = A_bar z0 + B_bar v_bar`.
pub fn nominal_trajectory(
    model: &StackedModel,
    z0: &DVector<f64>,
    vbar: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_len("z0", model.nx(), z0.len())?;
    check_len("v_bar", model.input_len(), vbar.len())?;
    Ok(&model.abar * z0 + &model.bbar * vbar)
}

/// Block `t` of a stacked vector with block size `size`.
pub fn block(v: &DVector<f64>, t: usize, size: usize) -> DVector<f64> {
    v.rows(t * size, size).into_owned()
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
    fn horizon_one_base_case() {
        let sys = double_integrator_sys();
        let m = build_stacked(&sys, 1).unwrap();
        let mut abar = DMatrix::zeros(4, 2);
        abar.view_mut((0, 0), (2, 2)).copy_from(&DMatrix::identity(2, 2));
        abar.view_mut((2, 0), (2, 2)).copy_from(&sys.a);
        assert_eq!(m.abar, abar);
        assert_eq!(m.bbar.rows(0, 2).into_owned(), DMatrix::zeros(2, 1));
        assert_eq!(m.bbar.rows(2, 2).into_owned(), sys.b);
        assert_eq!(m.ebar.rows(0, 2).into_owned(), DMatrix::zeros(2, 2));
        assert_eq!(m.ebar.rows(2, 2).into_owned(), sys.e);
    }

    #[test]
    fn horizon_two_bottom_block_is_a_squared() {
        let m = build_stacked(&double_integrator_sys(), 2).unwrap();
        assert_eq!(m.abar.rows(4, 2).into_owned(), dmatrix![1.0, 2.0; 0.0, 1.0]);
    }

    #[test]
    fn pinv_is_left_inverse() {
        let m = build_stacked(&double_integrator_sys(), 10).unwrap();
        let prod = &m.ebar_pinv * &m.ebar;
        assert!(linalg::max_abs(&(prod - DMatrix::identity(20, 20))) < 1e-8);
    }

    #[test]
    fn rank_deficient_e_rejected() {
        let res = LtiSystem::new(
            dmatrix![1.0, 1.0; 0.0, 1.0],
            dmatrix![0.5; 1.0],
            dmatrix![1.0, 2.0; 2.0, 4.0],
        );
        assert!(matches!(res, Err(DrmpcError::Model(_))));
    }

    #[test]
    fn zero_horizon_rejected() {
        assert!(build_stacked(&double_integrator_sys(), 0).is_err());
    }

    #[test]
    fn nominal_from_rest_point() {
        let m = build_stacked(&double_integrator_sys(), 2).unwrap();
        let z = nominal_trajectory(&m, &DVector::from_vec(vec![6.0, 0.0]), &DVector::zeros(2)).unwrap();
        for t in 0..3 {
            assert_eq!(block(&z, t, 2), DVector::from_vec(vec![6.0, 0.0]));
        }
        let zero = nominal_trajectory(&m, &DVector::zeros(2), &DVector::zeros(2)).unwrap();
        assert_eq!(zero, DVector::zeros(6));
    }

    #[test]
    fn nominal_dimension_mismatch() {
        let m = build_stacked(&double_integrator_sys(), 2).unwrap();
        assert!(nominal_trajectory(&m, &DVector::zeros(3), &DVector::zeros(2)).is_err());
        assert!(nominal_trajectory(&m, &DVector::zeros(2), &DVector::zeros(3)).is_err());
    }

    #[test]
    fn stabilizability() {
        assert!(double_integrator_sys().is_stabilizable());
        let unstab = LtiSystem {
            a: dmatrix![2.0, 0.0; 0.0, 0.5],
            b: dmatrix![0.0; 1.0],
            e: DMatrix::identity(2, 2),
        };
        assert!(!unstab.is_stabilizable());
    }
}
