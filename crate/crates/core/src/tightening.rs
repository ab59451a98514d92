//! Second-order-cone tightening of distributionally robust chance constraints.
//!
//! A state halfspace `h^T x_bar <= 1` held with probability `p` for every
//! distribution in the ambiguity set becomes
//! `h^T z_bar + sqrt(kappa) sqrt(p/(1-p)) ||h^T (B_bar M_bar + E_bar) S|| <= 1`
//! with `S S^T = I_N (x) Sigma_hat`; input rows use `l^T v_bar` and `l^T M_bar`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ambiguity::{AmbiguityCalibration, EmpiricalCovariance};
use crate::error::{DrmpcError, Result};
use crate::linalg;
use crate::policy::SadfPolicy;
use crate::prediction::{check_len, StackedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    State,
    Input,
}

/// A halfspace in stacked coordinates with right-hand side normalized to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfspaceSpec {
    pub kind: ConstraintKind,
    /// Length `(N+1) n_x` for state rows, `N n_u` for input rows.
    pub normal: DVector<f64>,
    pub level: f64,
    pub stage: usize,
    pub index: usize,
}

impl HalfspaceSpec {
    pub fn validate(&self, model: &StackedModel) -> Result<()> {
        let expected = match self.kind {
            ConstraintKind::State => model.state_len(),
            ConstraintKind::Input => model.input_len(),
        };
        check_len("halfspace normal", expected, self.normal.len())?;
        validate_level(self.level)?;
        if self.normal.amax() == 0.0 {
            return Err(DrmpcError::Constraint("halfspace normal is zero".into()));
        }
        Ok(())
    }
}

pub fn validate_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(DrmpcError::Constraint(format!(
            "probability level {level} must lie in (0, 1)"
        )));
    }
    Ok(())
}

/// `sqrt(p / (1 - p))`.
pub fn level_factor(level: f64) -> Result<f64> {
    validate_level(level)?;
    Ok((level / (1.0 - level)).sqrt())
}

/// `sqrt(kappa) sqrt(p / (1 - p))`.
pub fn tightening_factor(kappa: f64, level: f64) -> Result<f64> {
    if !(kappa >= 1.0) {
        return Err(DrmpcError::param("kappa", format!("{kappa} must be >= 1")));
    }
    Ok(kappa.sqrt() * level_factor(level)?)
}

/// Per-stage constraint `normal^T x_t <= rhs` (or on `u_t`) as read from a
/// scenario file. Stage range is half-open; by default every stage `0..N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConstraint {
    pub kind: ConstraintKind,
    #[serde(default)]
    pub stage_range: Option<[usize; 2]>,
    pub normal: Vec<f64>,
    #[serde(rename = "rhs_scale", default = "one")]
    pub rhs: f64,
    pub probability: f64,
    /// Also impose the constraint on the terminal set.
    #[serde(default = "yes")]
    pub terminal: bool,
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}

impl StageConstraint {
    /// Normal divided by the right-hand side, so that the row reads `a^T x <= 1`.
    pub fn scaled_normal(&self) -> Result<DVector<f64>> {
        if !(self.rhs > 0.0) {
            return Err(DrmpcError::Constraint(format!(
                "right-hand side {} must be positive",
                self.rhs
            )));
        }
        let a = DVector::from_vec(self.normal.clone()) / self.rhs;
        if a.amax() == 0.0 {
            return Err(DrmpcError::Constraint("constraint normal is zero".into()));
        }
        Ok(a)
    }

    /// Lifts into stacked halfspaces for stages in the configured range.
    pub fn lift(&self, model: &StackedModel, index: usize) -> Result<Vec<HalfspaceSpec>> {
        validate_level(self.probability)?;
        let a = self.scaled_normal()?;
        let (block, len) = match self.kind {
            ConstraintKind::State => (model.nx(), model.state_len()),
            ConstraintKind::Input => (model.nu(), model.input_len()),
        };
        check_len("stage constraint normal", block, a.len())?;
        // States exist at stages 0..=N, inputs at 0..N.
        let stages = match self.kind {
            ConstraintKind::State => model.horizon + 1,
            ConstraintKind::Input => model.horizon,
        };
        let [start, end] = self.stage_range.unwrap_or([0, model.horizon]);
        if start >= end || end > stages {
            return Err(DrmpcError::Constraint(format!(
                "stage range [{start}, {end}) outside 0..{stages}"
            )));
        }
        Ok((start..end)
            .map(|t| {
                let mut normal = DVector::zeros(len);
                normal.rows_mut(t * block, block).copy_from(&a);
                HalfspaceSpec {
                    kind: self.kind,
                    normal,
                    level: self.probability,
                    stage: t,
                    index,
                }
            })
            .collect())
    }
}

pub fn lift_all(constraints: &[StageConstraint], model: &StackedModel) -> Result<Vec<HalfspaceSpec>> {
    let mut out = Vec::new();
    for (i, c) in constraints.iter().enumerate() {
        out.extend(c.lift(model, i)?);
    }
    Ok(out)
}

/// Factor of `Sigma_hat`: Cholesky when positive definite, symmetric root otherwise.
pub fn covariance_factor(sigma_hat: &EmpiricalCovariance) -> Result<DMatrix<f64>> {
    linalg::psd_factor(&sigma_hat.sigma_hat, 1e-12, "empirical covariance")
}

/// Block-diagonal `S` with `S S^T = I_N (x) Sigma_hat`.
pub fn sigma_n_factor(sigma_hat: &EmpiricalCovariance, horizon: usize) -> Result<DMatrix<f64>> {
    Ok(linalg::block_diag_repeat(&covariance_factor(sigma_hat)?, horizon))
}

/// A tightened row `a^T y + factor ||(lin^T M_bar + off^T) S|| <= 1`, where
/// `y` is `z_bar` for state rows and `v_bar` for input rows.
///
/// Only the first `active_blocks` disturbance blocks can be nonzero in the
/// norm argument, so the cone keeps `active_blocks * n_w + 1` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SocRow {
    pub spec: HalfspaceSpec,
    pub factor: f64,
    /// Coefficient on `M_bar` from the left, length `N n_u`.
    pub lin: DVector<f64>,
    /// Constant part of the norm argument before `S`, length `N n_w`.
    pub offset: DVector<f64>,
    /// Factor of `Sigma_hat` (one block of `S`).
    pub s_block: DMatrix<f64>,
    pub active_blocks: usize,
}

fn last_nonzero_block(v: &DVector<f64>, block: usize) -> Option<usize> {
    (0..v.len() / block)
        .rev()
        .find(|b| v.rows(b * block, block).iter().any(|x| *x != 0.0))
}

fn build_row(
    spec: &HalfspaceSpec,
    lin: DVector<f64>,
    offset: DVector<f64>,
    model: &StackedModel,
    calib: &AmbiguityCalibration,
    s_block: &DMatrix<f64>,
) -> Result<SocRow> {
    spec.validate(model)?;
    let factor = tightening_factor(calib.kappa, spec.level)?;
    let from_lin = last_nonzero_block(&lin, model.nu()).unwrap_or(0);
    let from_off = last_nonzero_block(&offset, model.nw()).map_or(0, |b| b + 1);
    Ok(SocRow {
        spec: spec.clone(),
        factor,
        lin,
        offset,
        s_block: s_block.clone(),
        active_blocks: from_lin.max(from_off),
    })
}

/// State row: `lin = B_bar^T h`, `offset = E_bar^T h`.
pub fn state_row(
    h: &HalfspaceSpec,
    model: &StackedModel,
    calib: &AmbiguityCalibration,
    s_block: &DMatrix<f64>,
) -> Result<SocRow> {
    if h.kind != ConstraintKind::State {
        return Err(DrmpcError::Constraint("state_row needs a state halfspace".into()));
    }
    h.validate(model)?;
    let lin = model.bbar.tr_mul(&h.normal);
    let offset = model.ebar.tr_mul(&h.normal);
    build_row(h, lin, offset, model, calib, s_block)
}

/// Input row: `lin = l`, no constant part.
pub fn input_row(
    l: &HalfspaceSpec,
    model: &StackedModel,
    calib: &AmbiguityCalibration,
    s_block: &DMatrix<f64>,
) -> Result<SocRow> {
    if l.kind != ConstraintKind::Input {
        return Err(DrmpcError::Constraint("input_row needs an input halfspace".into()));
    }
    l.validate(model)?;
    build_row(l, l.normal.clone(), DVector::zeros(model.dist_len()), model, calib, s_block)
}

pub fn build_rows(
    specs: &[HalfspaceSpec],
    model: &StackedModel,
    calib: &AmbiguityCalibration,
    s_block: &DMatrix<f64>,
) -> Result<Vec<SocRow>> {
    specs
        .iter()
        .map(|h| match h.kind {
            ConstraintKind::State => state_row(h, model, calib, s_block),
            ConstraintKind::Input => input_row(h, model, calib, s_block),
        })
        .collect()
}

impl SocRow {
    pub fn nw(&self) -> usize {
        self.s_block.nrows()
    }

    pub fn cone_dim(&self) -> usize {
        1 + self.active_blocks * self.nw()
    }

    /// Norm argument `(lin^T M_bar + offset^T) S` on the active blocks.
    pub fn norm_vector(&self, mbar: &DMatrix<f64>) -> DVector<f64> {
        let nw = self.nw();
        let pre = mbar.tr_mul(&self.lin) + &self.offset;
        let mut out = DVector::zeros(self.active_blocks * nw);
        for b in 0..self.active_blocks {
            let seg = self.s_block.tr_mul(&pre.rows(b * nw, nw));
            out.rows_mut(b * nw, nw).copy_from(&seg);
        }
        out
    }

    /// Tightening offset `factor ||.||`, nonnegative.
    pub fn tightening(&self, mbar: &DMatrix<f64>) -> f64 {
        self.factor * self.norm_vector(mbar).norm()
    }

    /// `a^T y` for the nominal part.
    pub fn nominal_lhs(&self, nominal: &DVector<f64>, vbar: &DVector<f64>) -> f64 {
        match self.spec.kind {
            ConstraintKind::State => self.spec.normal.dot(nominal),
            ConstraintKind::Input => self.spec.normal.dot(vbar),
        }
    }

    /// `1 - a^T y - factor ||.||`; nonnegative iff the row holds.
    pub fn slack(&self, policy: &SadfPolicy, nominal: &DVector<f64>) -> f64 {
        1.0 - self.nominal_lhs(nominal, &policy.vbar) - self.tightening(&policy.mbar)
    }

    /// Linear map from the Toeplitz parameters (blocks `M_1..M_{N-1}`,
    /// row-major within a block) to the active part of `(lin^T M_bar) S`.
    pub fn toeplitz_coefficients(&self, horizon: usize, nu: usize) -> DMatrix<f64> {
        let nw = self.nw();
        let n_params = horizon.saturating_sub(1) * nu * nw;
        let width = self.active_blocks * nw;
        let mut pre = DMatrix::zeros(width, n_params);
        for s in 1..horizon {
            for a in 0..nu {
                for b in 0..nw {
                    let p = ((s - 1) * nu + a) * nw + b;
                    // M_bar[i*nu + a, (i-s)*nw + b] = theta_p for i >= s.
                    for i in s..horizon {
                        let col_block = i - s;
                        if col_block >= self.active_blocks {
                            break;
                        }
                        pre[(col_block * nw + b, p)] += self.lin[i * nu + a];
                    }
                }
            }
        }
        let mut out = DMatrix::zeros(width, n_params);
        for blk in 0..self.active_blocks {
            let seg = self.s_block.transpose() * pre.rows(blk * nw, nw);
            out.rows_mut(blk * nw, nw).copy_from(&seg);
        }
        out
    }

    /// Constant part of the norm argument after `S`, on the active blocks.
    pub fn offset_vector(&self) -> DVector<f64> {
        let nw = self.nw();
        let mut out = DVector::zeros(self.active_blocks * nw);
        for b in 0..self.active_blocks {
            out.rows_mut(b * nw, nw)
                .copy_from(&self.s_block.tr_mul(&self.offset.rows(b * nw, nw)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ambiguity::AmbiguityCalibration;
    use crate::prediction::{build_stacked, LtiSystem};
    use nalgebra::dmatrix;

    fn model(n: usize) -> StackedModel {
        let sys = LtiSystem::new(
            dmatrix![1.0, 1.0; 0.0, 1.0],
            dmatrix![0.5; 1.0],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        build_stacked(&sys, n).unwrap()
    }

    fn x2_constraint(p: f64) -> StageConstraint {
        StageConstraint {
            kind: ConstraintKind::State,
            stage_range: None,
            normal: vec![0.0, 1.0],
            rhs: 1.0,
            probability: p,
            terminal: true,
        }
    }

    #[test]
    fn level_factor_values() {
        assert!((level_factor(0.9).unwrap() - 3.0).abs() < 1e-15);
        assert_eq!(level_factor(0.5).unwrap(), 1.0);
        assert!(level_factor(1.0).is_err());
        assert!(level_factor(0.0).is_err());
    }

    #[test]
    fn sigma_factor_scalar_case() {
        let cov = EmpiricalCovariance::from_matrix(DMatrix::identity(2, 2) * 1e-4, 100).unwrap();
        let s = sigma_n_factor(&cov, 10).unwrap();
        assert!((s - DMatrix::<f64>::identity(20, 20) * 1e-2).amax() < 1e-15);
    }

    #[test]
    fn rhs_must_be_positive() {
        let mut c = x2_constraint(0.9);
        c.rhs = 0.0;
        assert!(c.scaled_normal().is_err());
        c.rhs = 2.0;
        assert_eq!(c.scaled_normal().unwrap()[1], 0.5);
    }

    #[test]
    fn stage_rows_have_growing_cones() {
        let m = model(10);
        let specs = x2_constraint(0.9).lift(&m, 0).unwrap();
        assert_eq!(specs.len(), 10);
        let calib = AmbiguityCalibration::exact_moments();
        let s = DMatrix::identity(2, 2);
        let rows = build_rows(&specs, &m, &calib, &s).unwrap();
        for (t, r) in rows.iter().enumerate() {
            assert_eq!(r.active_blocks, t, "stage {t}");
            assert_eq!(r.cone_dim(), 1 + 2 * t);
        }
    }

    #[test]
    fn zero_covariance_gives_nominal_row() {
        let m = model(4);
        let specs = x2_constraint(0.9).lift(&m, 0).unwrap();
        let calib = AmbiguityCalibration::exact_moments();
        let rows = build_rows(&specs, &m, &calib, &DMatrix::zeros(2, 2)).unwrap();
        let p = SadfPolicy::from_blocks(
            DVector::from_element(4, 0.1),
            &[dmatrix![1.0, 2.0], dmatrix![0.5, 0.5], dmatrix![0.1, 0.0]],
            1,
            2,
        )
        .unwrap();
        for r in &rows {
            assert_eq!(r.tightening(&p.mbar), 0.0);
        }
    }

    #[test]
    fn toeplitz_coefficients_match_direct_evaluation() {
        let m = model(6);
        let specs = x2_constraint(0.8).lift(&m, 0).unwrap();
        let calib = AmbiguityCalibration::exact_moments();
        let s = dmatrix![0.2, 0.0; 0.05, 0.1];
        let rows = build_rows(&specs, &m, &calib, &s).unwrap();
        let blocks: Vec<DMatrix<f64>> = (1..6).map(|k| dmatrix![0.1 * k as f64, -0.3 / k as f64]).collect();
        let theta = DVector::from_iterator(10, blocks.iter().flat_map(|b| b.iter().cloned().collect::<Vec<_>>()));
        let p = SadfPolicy::from_blocks(DVector::zeros(6), &blocks, 1, 2).unwrap();
        for r in &rows {
            let direct = r.norm_vector(&p.mbar);
            let via = r.toeplitz_coefficients(6, 1) * &theta + r.offset_vector();
            assert!((direct - via).amax() < 1e-14);
        }
    }
}
