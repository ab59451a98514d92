//! Affine disturbance-feedback (SADF) and error-feedback (EF) policies.
//!
//! A SADF policy applies `u_bar = v_bar + M_bar w_bar` with `M_bar` strictly
//! block-lower-triangular. The optimizer only uses block-Toeplitz `M_bar`
//! (blocks `M_1..M_{N-1}`), but shifted candidates are not Toeplitz in their
//! last block row, so the type stores the assembled matrix.
//!
//! An EF policy applies `u_t = g_t + sum_i K_bar[t, i] (x_i - z_i)` where
//! `z` is the nominal trajectory driven by `g`. Block column 0 of `K_bar`
//! acts on the initial error `x_0 - z_0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DrmpcError, Result};
use crate::linalg;
use crate::prediction::{check_len, StackedModel};

/// Tolerance for structural-zero and Toeplitz checks.
pub const STRUCTURE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SadfPolicy {
    pub vbar: DVector<f64>,
    /// `N n_u x N n_w`, strictly block-lower-triangular.
    pub mbar: DMatrix<f64>,
    pub nu: usize,
    pub nw: usize,
}

impl SadfPolicy {
    /// Assembles `M_bar[i, t] = M_{i-t}` for `i > t` from blocks `M_1..M_{N-1}`.
    pub fn from_blocks(vbar: DVector<f64>, blocks: &[DMatrix<f64>], nu: usize, nw: usize) -> Result<Self> {
        if nu == 0 || vbar.len() % nu != 0 {
            return Err(DrmpcError::DimensionMismatch {
                context: "v_bar length vs n_u",
                expected: nu,
                got: vbar.len(),
            });
        }
        let n = vbar.len() / nu;
        check_len("number of M blocks", n.saturating_sub(1), blocks.len())?;
        for b in blocks {
            if b.shape() != (nu, nw) {
                return Err(DrmpcError::DimensionMismatch {
                    context: "M block shape",
                    expected: nu * nw,
                    got: b.nrows() * b.ncols(),
                });
            }
        }
        Ok(SadfPolicy {
            mbar: assemble_toeplitz(blocks, n, nu, nw),
            vbar,
            nu,
            nw,
        })
    }

    pub fn zero(horizon: usize, nu: usize, nw: usize) -> Self {
        SadfPolicy {
            vbar: DVector::zeros(horizon * nu),
            mbar: DMatrix::zeros(horizon * nu, horizon * nw),
            nu,
            nw,
        }
    }

    pub fn horizon(&self) -> usize {
        self.vbar.len() / self.nu
    }

    /// Blocks `M_1..M_{N-1}` read off the first block column.
    pub fn m_blocks(&self) -> Vec<DMatrix<f64>> {
        (1..self.horizon())
            .map(|s| {
                self.mbar
                    .view((s * self.nu, 0), (self.nu, self.nw))
                    .into_owned()
            })
            .collect()
    }

    /// Largest deviation of `M_bar` from the Toeplitz matrix built from its
    /// first block column.
    pub fn toeplitz_deviation(&self) -> f64 {
        let rebuilt = assemble_toeplitz(&self.m_blocks(), self.horizon(), self.nu, self.nw);
        linalg::max_abs(&(&self.mbar - rebuilt))
    }

    /// Largest entry on or above the block diagonal of `M_bar`.
    pub fn causality_deviation(&self) -> f64 {
        let n = self.horizon();
        let mut dev = 0.0_f64;
        for i in 0..n {
            for t in i..n {
                let b = self.mbar.view((i * self.nu, t * self.nw), (self.nu, self.nw));
                dev = dev.max(b.iter().fold(0.0, |a, v| a.max(v.abs())));
            }
        }
        dev
    }

    /// Stacked inputs for a disturbance realization.
    pub fn inputs(&self, wbar: &DVector<f64>) -> DVector<f64> {
        &self.vbar + &self.mbar * wbar
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorFeedbackPolicy {
    /// Feedforward `g_bar`; the nominal input sequence.
    pub gbar: DVector<f64>,
    /// `N n_u x (N+1) n_x`, block-lower-triangular, zero last block column.
    pub kbar: DMatrix<f64>,
    pub nu: usize,
    pub nx: usize,
}

impl ErrorFeedbackPolicy {
    pub fn horizon(&self) -> usize {
        self.gbar.len() / self.nu
    }

    pub fn gain(&self, t: usize, i: usize) -> DMatrix<f64> {
        self.kbar
            .view((t * self.nu, i * self.nx), (self.nu, self.nx))
            .into_owned()
    }

    /// Diagonal gain `K_0` applied to the current error.
    pub fn k0(&self) -> DMatrix<f64> {
        self.gain(0, 0)
    }

    /// Nominal trajectory `z_{t+1} = A z_t + B g_t`.
    pub fn nominal(&self, model: &StackedModel, z0: &DVector<f64>) -> Result<DVector<f64>> {
        crate::prediction::nominal_trajectory(model, z0, &self.gbar)
    }

    /// Offset of the equivalent state-feedback law `u_bar = g_sf + K_bar x_bar`,
    /// i.e. `g_bar - K_bar z_bar`.
    pub fn state_feedback_offset(&self, model: &StackedModel, z0: &DVector<f64>) -> Result<DVector<f64>> {
        let z = self.nominal(model, z0)?;
        Ok(&self.gbar - &self.kbar * z)
    }

    /// Largest entry above the block diagonal or in the last block column.
    pub fn causality_deviation(&self) -> f64 {
        let n = self.horizon();
        let mut dev = 0.0_f64;
        for t in 0..n {
            for i in (t + 1)..=n {
                let b = self.kbar.view((t * self.nu, i * self.nx), (self.nu, self.nx));
                dev = dev.max(b.iter().fold(0.0, |a, v| a.max(v.abs())));
            }
        }
        dev
    }
}

pub fn assemble_toeplitz(blocks: &[DMatrix<f64>], horizon: usize, nu: usize, nw: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(horizon * nu, horizon * nw);
    for i in 1..horizon {
        for t in 0..i {
            m.view_mut((i * nu, t * nw), (nu, nw))
                .copy_from(&blocks[i - t - 1]);
        }
    }
    m
}

fn check_sadf(policy: &SadfPolicy, model: &StackedModel) -> Result<()> {
    check_len("SADF n_u", model.nu(), policy.nu)?;
    check_len("SADF n_w", model.nw(), policy.nw)?;
    check_len("v_bar", model.input_len(), policy.vbar.len())?;
    if policy.mbar.shape() != (model.input_len(), model.dist_len()) {
        return Err(DrmpcError::DimensionMismatch {
            context: "M_bar entries",
            expected: model.input_len() * model.dist_len(),
            got: policy.mbar.len(),
        });
    }
    Ok(())
}

fn check_ef(policy: &ErrorFeedbackPolicy, model: &StackedModel) -> Result<()> {
    check_len("EF n_u", model.nu(), policy.nu)?;
    check_len("EF n_x", model.nx(), policy.nx)?;
    check_len("g_bar", model.input_len(), policy.gbar.len())?;
    if policy.kbar.shape() != (model.input_len(), model.state_len()) {
        return Err(DrmpcError::DimensionMismatch {
            context: "K_bar entries",
            expected: model.input_len() * model.state_len(),
            got: policy.kbar.len(),
        });
    }
    Ok(())
}

/// `K_bar = (I + M_bar E_bar^+ B_bar)^{-1} M_bar E_bar^+`, using the given
/// disturbance map and its pseudo-inverse.
fn feedback_from_disturbance_map(
    mbar: &DMatrix<f64>,
    emap_pinv: &DMatrix<f64>,
    bbar: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let me = mbar * emap_pinv;
    let lhs = DMatrix::identity(mbar.nrows(), mbar.nrows()) + &me * bbar;
    let inv = linalg::lu_inverse(&lhs, "I + M E^+ B")?;
    Ok(inv * me)
}

/// SADF to EF conversion.
///
/// Block columns `1..N` of `K_bar` come from
/// `K_bar = (I + M_bar E_bar^+ B_bar)^{-1} M_bar E_bar^+`, which leaves the
/// initial-error column at zero. That column is filled by treating the
/// initial error as one more disturbance `e_0 = E w_{-1}` whose input response
/// continues the first block column of `M_bar` (`u_t` reacts with
/// `M_bar[t+1, 0]`, and `u_{N-1}` not at all). For block-Toeplitz `M_bar`
/// this makes `K_bar` block-Toeplitz including column 0.
///
/// The feedforward equals `v_bar`; the offset of the equivalent state-feedback
/// law is available from [`ErrorFeedbackPolicy::state_feedback_offset`].
pub fn sadf_to_ef(policy: &SadfPolicy, model: &StackedModel) -> Result<ErrorFeedbackPolicy> {
    check_sadf(policy, model)?;
    let (nx, nu, nw, n) = (model.nx(), model.nu(), model.nw(), model.horizon);
    let mut kbar = feedback_from_disturbance_map(&policy.mbar, &model.ebar_pinv, &model.bbar)?;

    let mut m_ext = DMatrix::zeros(n * nu, (n + 1) * nw);
    for t in 0..n.saturating_sub(1) {
        m_ext
            .view_mut((t * nu, 0), (nu, nw))
            .copy_from(&policy.mbar.view(((t + 1) * nu, 0), (nu, nw)));
    }
    m_ext
        .view_mut((0, nw), (n * nu, n * nw))
        .copy_from(&policy.mbar);
    let mut e_ext = DMatrix::zeros(model.state_len(), (n + 1) * nw);
    e_ext
        .view_mut((0, 0), (model.state_len(), nw))
        .copy_from(&(&model.abar * &model.sys.e));
    e_ext
        .view_mut((0, nw), (model.state_len(), n * nw))
        .copy_from(&model.ebar);
    let (e_ext_pinv, _) = linalg::pinv(&e_ext, crate::prediction::RANK_TOL);
    let k_ext = feedback_from_disturbance_map(&m_ext, &e_ext_pinv, &model.bbar)?;
    kbar.view_mut((0, 0), (n * nu, nx))
        .copy_from(&k_ext.view((0, 0), (n * nu, nx)));

    Ok(ErrorFeedbackPolicy {
        gbar: policy.vbar.clone(),
        kbar,
        nu,
        nx,
    })
}

/// EF to SADF conversion:
/// `M_bar = K_bar (I - B_bar K_bar)^{-1} E_bar` and
/// `v_bar = K_bar (I - B_bar K_bar)^{-1} (A_bar z0 + B_bar g_sf) + g_sf`
/// with `g_sf` the state-feedback offset of the EF policy.
pub fn ef_to_sadf(policy: &ErrorFeedbackPolicy, model: &StackedModel, z0: &DVector<f64>) -> Result<SadfPolicy> {
    check_ef(policy, model)?;
    check_len("z0", model.nx(), z0.len())?;
    let dim = model.state_len();
    let lhs = DMatrix::identity(dim, dim) - &model.bbar * &policy.kbar;
    let inv = linalg::lu_inverse(&lhs, "I - B K")?;
    let kinv = &policy.kbar * inv;
    let g_sf = policy.state_feedback_offset(model, z0)?;
    let mbar = &kinv * &model.ebar;
    let vbar = &kinv * (&model.abar * z0 + &model.bbar * &g_sf) + &g_sf;
    Ok(SadfPolicy {
        vbar,
        mbar,
        nu: model.nu(),
        nw: model.nw(),
    })
}

/// Shifted candidate for the next time step, with `lambda = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftedCandidate {
    pub policy: ErrorFeedbackPolicy,
    pub nominal: DVector<f64>,
    pub lambda: f64,
}

impl ShiftedCandidate {
    pub fn z0(&self) -> DVector<f64> {
        self.nominal.rows(0, self.policy.nx).into_owned()
    }
}

/// Shifts an EF policy by one step and appends the terminal controller:
/// `K~[t, i] = K_bar[t+1, i+1]`, `g~_t = g_{t+1}`, last row `K` on the
/// diagonal with `g~_{N-1} = K z*_N`, and `z~ = [z*_1..z*_N, (A+BK) z*_N]`.
pub fn shift_candidate(
    prev: &ErrorFeedbackPolicy,
    prev_nominal: &DVector<f64>,
    terminal_gain: &DMatrix<f64>,
    model: &StackedModel,
) -> Result<ShiftedCandidate> {
    check_ef(prev, model)?;
    check_len("previous nominal", model.state_len(), prev_nominal.len())?;
    let (nx, nu, n) = (model.nx(), model.nu(), model.horizon);
    if terminal_gain.shape() != (nu, nx) {
        return Err(DrmpcError::DimensionMismatch {
            context: "terminal gain entries",
            expected: nu * nx,
            got: terminal_gain.len(),
        });
    }
    let mut kbar = DMatrix::zeros(n * nu, (n + 1) * nx);
    let mut gbar = DVector::zeros(n * nu);
    for t in 0..n - 1 {
        for i in 0..n {
            kbar.view_mut((t * nu, i * nx), (nu, nx))
                .copy_from(&prev.kbar.view(((t + 1) * nu, (i + 1) * nx), (nu, nx)));
        }
        gbar.rows_mut(t * nu, nu)
            .copy_from(&prev.gbar.rows((t + 1) * nu, nu));
    }
    let z_n = prev_nominal.rows(n * nx, nx).into_owned();
    kbar.view_mut(((n - 1) * nu, (n - 1) * nx), (nu, nx))
        .copy_from(terminal_gain);
    gbar.rows_mut((n - 1) * nu, nu)
        .copy_from(&(terminal_gain * &z_n));

    let mut nominal = DVector::zeros(model.state_len());
    nominal
        .rows_mut(0, n * nx)
        .copy_from(&prev_nominal.rows(nx, n * nx));
    let a_k = &model.sys.a + &model.sys.b * terminal_gain;
    nominal.rows_mut(n * nx, nx).copy_from(&(a_k * z_n));

    Ok(ShiftedCandidate {
        policy: ErrorFeedbackPolicy { gbar, kbar, nu, nx },
        nominal,
        lambda: 1.0,
    })
}

/// Shift that stays inside the block-Toeplitz family: same `M` blocks,
/// `v~_t = v_{t+1}` and `v~_{N-1} = K z*_N`. Started from `z0 = z*_1`.
pub fn shift_toeplitz_candidate(
    prev: &SadfPolicy,
    prev_nominal: &DVector<f64>,
    terminal_gain: &DMatrix<f64>,
    model: &StackedModel,
) -> Result<SadfPolicy> {
    check_sadf(prev, model)?;
    check_len("previous nominal", model.state_len(), prev_nominal.len())?;
    let (nx, nu, n) = (model.nx(), model.nu(), model.horizon);
    let mut vbar = DVector::zeros(n * nu);
    vbar.rows_mut(0, (n - 1) * nu)
        .copy_from(&prev.vbar.rows(nu, (n - 1) * nu));
    let z_n = prev_nominal.rows(n * nx, nx).into_owned();
    vbar.rows_mut((n - 1) * nu, nu)
        .copy_from(&(terminal_gain * z_n));
    SadfPolicy::from_blocks(vbar, &prev.m_blocks(), nu, prev.nw)
}

/// `u = g_0 + K_0 (x - z0)`.
pub fn applied_input(policy: &ErrorFeedbackPolicy, x: &DVector<f64>, z0: &DVector<f64>) -> DVector<f64> {
    let g0 = policy.gbar.rows(0, policy.nu).into_owned();
    g0 + policy.k0() * (x - z0)
}

/// Step-by-step simulation of the SADF policy from `x0`; returns `(x_bar, u_bar)`.
pub fn simulate_sadf(
    policy: &SadfPolicy,
    model: &StackedModel,
    x0: &DVector<f64>,
    wbar: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_sadf(policy, model)?;
    check_len("w_bar", model.dist_len(), wbar.len())?;
    let ubar = policy.inputs(wbar);
    let (nx, nu, nw, n) = (model.nx(), model.nu(), model.nw(), model.horizon);
    let mut xbar = DVector::zeros(model.state_len());
    xbar.rows_mut(0, nx).copy_from(x0);
    for t in 0..n {
        let x = xbar.rows(t * nx, nx).into_owned();
        let next = model.sys.step(
            &x,
            &ubar.rows(t * nu, nu).into_owned(),
            &wbar.rows(t * nw, nw).into_owned(),
        );
        xbar.rows_mut((t + 1) * nx, nx).copy_from(&next);
    }
    Ok((xbar, ubar))
}

/// Step-by-step simulation of the EF policy from `x0` with nominal start `z0`.
pub fn simulate_ef(
    policy: &ErrorFeedbackPolicy,
    model: &StackedModel,
    x0: &DVector<f64>,
    z0: &DVector<f64>,
    wbar: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_ef(policy, model)?;
    check_len("w_bar", model.dist_len(), wbar.len())?;
    let (nx, nu, nw, n) = (model.nx(), model.nu(), model.nw(), model.horizon);
    let z = policy.nominal(model, z0)?;
    let mut xbar = DVector::zeros(model.state_len());
    let mut ubar = DVector::zeros(model.input_len());
    xbar.rows_mut(0, nx).copy_from(x0);
    for t in 0..n {
        let mut u = policy.gbar.rows(t * nu, nu).into_owned();
        for i in 0..=t {
            let e = xbar.rows(i * nx, nx) - z.rows(i * nx, nx);
            u += policy.kbar.view((t * nu, i * nx), (nu, nx)) * e;
        }
        let x = xbar.rows(t * nx, nx).into_owned();
        let next = model.sys.step(&x, &u, &wbar.rows(t * nw, nw).into_owned());
        xbar.rows_mut((t + 1) * nx, nx).copy_from(&next);
        ubar.rows_mut(t * nu, nu).copy_from(&u);
    }
    Ok((xbar, ubar))
}

#[cfg(test)]
mod tests {
    use super::*;
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

    fn sample_policy(n: usize) -> SadfPolicy {
        let blocks: Vec<DMatrix<f64>> = (1..n)
            .map(|s| dmatrix![0.3 / s as f64, -0.2 * (s as f64).sin()])
            .collect();
        let vbar = DVector::from_fn(n, |i, _| (i as f64 * 0.7).cos());
        SadfPolicy::from_blocks(vbar, &blocks, 1, 2).unwrap()
    }

    #[test]
    fn zero_m_gives_zero_k() {
        let m = model(5);
        let p = SadfPolicy {
            vbar: DVector::from_element(5, 0.4),
            ..SadfPolicy::zero(5, 1, 2)
        };
        let ef = sadf_to_ef(&p, &m).unwrap();
        assert_eq!(linalg::max_abs(&ef.kbar), 0.0);
        assert_eq!(ef.gbar, p.vbar);
    }

    #[test]
    fn zero_k_gives_zero_m() {
        let m = model(4);
        let ef = ErrorFeedbackPolicy {
            gbar: DVector::from_element(4, -1.0),
            kbar: DMatrix::zeros(4, 10),
            nu: 1,
            nx: 2,
        };
        let p = ef_to_sadf(&ef, &m, &DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(linalg::max_abs(&p.mbar), 0.0);
        assert!((p.vbar - ef.gbar).amax() < 1e-12);
    }

    #[test]
    fn state_feedback_offset_matches_closed_form() {
        // (I + M E^+ B)^{-1} (v - M E^+ A_bar z0) with the column-0-free gain.
        let m = model(6);
        let p = sample_policy(6);
        let z0 = DVector::from_vec(vec![1.5, -0.5]);
        let me = &p.mbar * &m.ebar_pinv;
        let lhs = DMatrix::identity(6, 6) + &me * &m.bbar;
        let inv = lhs.clone().try_inverse().unwrap();
        let expected = &inv * (&p.vbar - &me * &m.abar * &z0);
        let mut ef = sadf_to_ef(&p, &m).unwrap();
        ef.kbar.view_mut((0, 0), (6, 2)).fill(0.0);
        let got = ef.state_feedback_offset(&m, &z0).unwrap();
        assert!((got - expected).amax() < 1e-10);
    }

    #[test]
    fn toeplitz_m_gives_toeplitz_k_including_first_column() {
        let n = 6;
        let m = model(n);
        let ef = sadf_to_ef(&sample_policy(n), &m).unwrap();
        for t in 0..n {
            for i in 0..=t {
                let diff = ef.gain(t, i) - ef.gain(t - i, 0);
                assert!(diff.amax() < 1e-10, "block ({t},{i})");
            }
        }
        assert!(ef.causality_deviation() < STRUCTURE_TOL);
    }

    #[test]
    fn first_diagonal_gain_is_m1_times_e_inverse() {
        let m = model(5);
        let p = sample_policy(5);
        let ef = sadf_to_ef(&p, &m).unwrap();
        let expected = &p.m_blocks()[0] * m.sys.e.clone().try_inverse().unwrap();
        assert!((ef.k0() - expected).amax() < 1e-10);
    }

    #[test]
    fn applied_input_arithmetic() {
        let ef = ErrorFeedbackPolicy {
            gbar: DVector::from_vec(vec![2.0, 0.0]),
            kbar: {
                let mut k = DMatrix::zeros(2, 6);
                k[(0, 0)] = 1.0;
                k
            },
            nu: 1,
            nx: 2,
        };
        let z0 = DVector::from_vec(vec![1.0, 1.0]);
        let x = DVector::from_vec(vec![4.0, 1.0]);
        assert_eq!(applied_input(&ef, &x, &z0)[0], 5.0);
        assert_eq!(applied_input(&ef, &z0, &z0)[0], 2.0);
    }

    #[test]
    fn shift_of_zero_policy_is_zero() {
        let m = model(4);
        let ef = sadf_to_ef(&SadfPolicy::zero(4, 1, 2), &m).unwrap();
        let k = dmatrix![-0.6, -1.2];
        let c = shift_candidate(&ef, &DVector::zeros(10), &k, &m).unwrap();
        assert_eq!(c.lambda, 1.0);
        assert_eq!(c.nominal, DVector::zeros(10));
        assert_eq!(c.policy.gbar, DVector::zeros(4));
        assert_eq!(c.policy.gain(3, 3), k);
    }

    #[test]
    fn shifted_nominal_is_previous_tail() {
        let m = model(5);
        let p = sample_policy(5);
        let z0 = DVector::from_vec(vec![2.0, 0.5]);
        let ef = sadf_to_ef(&p, &m).unwrap();
        let z = ef.nominal(&m, &z0).unwrap();
        let k = dmatrix![-0.6, -1.2];
        let c = shift_candidate(&ef, &z, &k, &m).unwrap();
        assert_eq!(c.nominal.rows(0, 10), z.rows(2, 10));
        // Candidate nominal is consistent with its own feedforward.
        let zc = c.policy.nominal(&m, &c.z0()).unwrap();
        assert!((zc - &c.nominal).amax() < 1e-12);
    }

    #[test]
    fn toeplitz_shift_keeps_blocks() {
        let m = model(5);
        let p = sample_policy(5);
        let z = crate::prediction::nominal_trajectory(&m, &DVector::from_vec(vec![2.0, 0.5]), &p.vbar).unwrap();
        let k = dmatrix![-0.6, -1.2];
        let s = shift_toeplitz_candidate(&p, &z, &k, &m).unwrap();
        assert_eq!(s.mbar, p.mbar);
        let zs = crate::prediction::nominal_trajectory(&m, &z.rows(2, 2).into_owned(), &s.vbar).unwrap();
        assert!((zs.rows(0, 10) - z.rows(2, 10)).amax() < 1e-12);
    }
}
