//! Solver-agnostic second-order-cone programs with a sum-of-squares objective.
//!
//! ```text
//! minimize    ||F x + f||^2 + q^T x + c
//! subject to  A_eq x = b_eq
//!             t_i^T x + t0_i >= ||V_i x + v_i||      (SOC; linear when V_i is empty)
//!             lo_j <= x_j <= hi_j
//! ```
//!
//! The reference backend hands the program to Clarabel and verifies the
//! returned point against the original constraints.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DrmpcError, Result};

pub const DEFAULT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    /// Rows of the squared affine forms.
    pub sq: DMatrix<f64>,
    pub sq_offset: DVector<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
}

impl Objective {
    pub fn zero(n: usize) -> Self {
        Objective {
            sq: DMatrix::zeros(0, n),
            sq_offset: DVector::zeros(0),
            linear: DVector::zeros(n),
            constant: 0.0,
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let r = &self.sq * x + &self.sq_offset;
        r.norm_squared() + self.linear.dot(x) + self.constant
    }

    /// Appends the rows `||F x + f||^2`.
    pub fn add_squares(&mut self, f: &DMatrix<f64>, off: &DVector<f64>) {
        let n = self.sq.ncols();
        assert_eq!(f.ncols(), n, "squared form width");
        let rows = self.sq.nrows();
        let mut sq = DMatrix::zeros(rows + f.nrows(), n);
        sq.rows_mut(0, rows).copy_from(&self.sq);
        sq.rows_mut(rows, f.nrows()).copy_from(f);
        let mut so = DVector::zeros(rows + f.nrows());
        so.rows_mut(0, rows).copy_from(&self.sq_offset);
        so.rows_mut(rows, f.nrows()).copy_from(off);
        self.sq = sq;
        self.sq_offset = so;
    }

    /// Replaces the squared rows by an equivalent set of at most `n + 1` rows
    /// (QR of `[F f]`); the remainder moves into the constant.
    pub fn compress(&mut self) {
        let n = self.sq.ncols();
        let m = self.sq.nrows();
        if m <= n + 1 {
            return;
        }
        let mut aug = DMatrix::zeros(m, n + 1);
        aug.columns_mut(0, n).copy_from(&self.sq);
        aug.column_mut(n).copy_from(&self.sq_offset);
        let r = aug.qr().r();
        // r is (n+1) x (n+1) upper triangular; its last row holds only the
        // offset residual, which is constant.
        let last = r[(n, n)];
        self.constant += last * last;
        self.sq = r.view((0, 0), (n, n)).into_owned();
        self.sq_offset = r.view((0, n), (n, 1)).column(0).into_owned();
    }

    /// Hessian and gradient of the Clarabel form `0.5 x^T P x + p^T x`.
    pub fn quadratic_form(&self) -> (DMatrix<f64>, DVector<f64>, f64) {
        let p = self.sq.tr_mul(&self.sq) * 2.0;
        let q = self.sq.tr_mul(&self.sq_offset) * 2.0 + &self.linear;
        (p, q, self.sq_offset.norm_squared() + self.constant)
    }
}

/// `t^T x + t0 >= ||V x + v||`; with zero rows in `V` this is a linear inequality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocConstraint {
    pub name: String,
    pub t: DVector<f64>,
    pub t0: f64,
    pub v: DMatrix<f64>,
    pub v0: DVector<f64>,
}

impl SocConstraint {
    /// `(t^T x + t0) - ||V x + v||`, nonnegative when satisfied.
    pub fn margin(&self, x: &DVector<f64>) -> f64 {
        let lhs = self.t.dot(x) + self.t0;
        let rhs = if self.v.nrows() == 0 {
            0.0
        } else {
            (&self.v * x + &self.v0).norm()
        };
        lhs - rhs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub var: usize,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConicProgram {
    pub blocks: Vec<VarBlock>,
    pub n_vars: usize,
    pub objective: Objective,
    pub eq_a: DMatrix<f64>,
    pub eq_b: DVector<f64>,
    pub socs: Vec<SocConstraint>,
    pub bounds: Vec<Bound>,
}

impl ConicProgram {
    pub fn new() -> Self {
        ConicProgram {
            blocks: Vec::new(),
            n_vars: 0,
            objective: Objective::zero(0),
            eq_a: DMatrix::zeros(0, 0),
            eq_b: DVector::zeros(0),
            socs: Vec::new(),
            bounds: Vec::new(),
        }
    }

    /// Registers a block of variables; must precede any constraint.
    pub fn add_block(&mut self, name: &str, len: usize) -> Result<usize> {
        if !self.socs.is_empty() || self.eq_a.nrows() > 0 || self.objective.sq.nrows() > 0 {
            return Err(DrmpcError::Config(
                "variable blocks must be registered before constraints".into(),
            ));
        }
        if self.blocks.iter().any(|b| b.name == name) {
            return Err(DrmpcError::Config(format!("duplicate variable block `{name}`")));
        }
        let offset = self.n_vars;
        self.blocks.push(VarBlock {
            name: name.to_string(),
            offset,
            len,
        });
        self.n_vars += len;
        self.objective = Objective::zero(self.n_vars);
        self.eq_a = DMatrix::zeros(0, self.n_vars);
        Ok(offset)
    }

    pub fn block(&self, name: &str) -> Option<&VarBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    fn check_width(&self, cols: usize, what: &str) -> Result<()> {
        if cols != self.n_vars {
            return Err(DrmpcError::Config(format!(
                "{what} has {cols} columns, program has {} variables",
                self.n_vars
            )));
        }
        Ok(())
    }

    pub fn add_equalities(&mut self, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<()> {
        self.check_width(a.ncols(), "equality block")?;
        let rows = self.eq_a.nrows();
        let mut new_a = DMatrix::zeros(rows + a.nrows(), self.n_vars);
        new_a.rows_mut(0, rows).copy_from(&self.eq_a);
        new_a.rows_mut(rows, a.nrows()).copy_from(a);
        let mut new_b = DVector::zeros(rows + b.len());
        new_b.rows_mut(0, rows).copy_from(&self.eq_b);
        new_b.rows_mut(rows, b.len()).copy_from(b);
        self.eq_a = new_a;
        self.eq_b = new_b;
        Ok(())
    }

    pub fn add_soc(&mut self, c: SocConstraint) -> Result<()> {
        self.check_width(c.t.len(), "SOC scalar part")?;
        if c.v.nrows() > 0 {
            self.check_width(c.v.ncols(), "SOC vector part")?;
        }
        if c.v.nrows() != c.v0.len() {
            return Err(DrmpcError::Config(format!("SOC `{}` offset length mismatch", c.name)));
        }
        self.socs.push(c);
        Ok(())
    }

    pub fn add_bound(&mut self, var: usize, lower: Option<f64>, upper: Option<f64>) -> Result<()> {
        if var >= self.n_vars {
            return Err(DrmpcError::Config(format!("bound on unknown variable {var}")));
        }
        self.bounds.push(Bound { var, lower, upper });
        Ok(())
    }

    /// Largest constraint violation at `x` (equalities, cones and bounds).
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let mut v = 0.0_f64;
        if self.eq_a.nrows() > 0 {
            v = v.max((&self.eq_a * x - &self.eq_b).amax());
        }
        for c in &self.socs {
            v = v.max(-c.margin(x));
        }
        for b in &self.bounds {
            if let Some(lo) = b.lower {
                v = v.max(lo - x[b.var]);
            }
            if let Some(hi) = b.upper {
                v = v.max(x[b.var] - hi);
            }
        }
        v
    }

    /// Values of each named block.
    pub fn split(&self, x: &DVector<f64>) -> BTreeMap<String, DVector<f64>> {
        self.blocks
            .iter()
            .map(|b| (b.name.clone(), x.rows(b.offset, b.len).into_owned()))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl Default for ConicProgram {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: u32,
    pub solve_time: Duration,
    pub max_violation: f64,
    pub detail: String,
}

pub trait ConicBackend: Send + Sync {
    fn solve(&self, program: &ConicProgram, tolerance: f64) -> Result<ConicSolution>;
}

/// Interior-point backend on top of Clarabel.
#[derive(Debug, Clone, Default)]
pub struct ClarabelBackend;

fn dense_to_csc(m: &DMatrix<f64>, upper_only: bool) -> CscMatrix<f64> {
    let (rows, cols) = m.shape();
    let mut colptr = Vec::with_capacity(cols + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for j in 0..cols {
        let last = if upper_only { (j + 1).min(rows) } else { rows };
        for i in 0..last {
            let v = m[(i, j)];
            if v != 0.0 {
                rowval.push(i);
                nzval.push(v);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(rows, cols, colptr, rowval, nzval)
}

/// Stacks the program into Clarabel's `A x + s = b`, `s in K` form.
fn clarabel_data(program: &ConicProgram) -> (DMatrix<f64>, Vec<f64>, Vec<SupportedConeT<f64>>) {
    let n = program.n_vars;
    let n_lin = program.socs.iter().filter(|c| c.v.nrows() == 0).count()
        + program
            .bounds
            .iter()
            .map(|b| b.lower.is_some() as usize + b.upper.is_some() as usize)
            .sum::<usize>();
    let soc_rows: usize = program
        .socs
        .iter()
        .filter(|c| c.v.nrows() > 0)
        .map(|c| 1 + c.v.nrows())
        .sum();
    let m = program.eq_a.nrows() + n_lin + soc_rows;
    let mut a = DMatrix::zeros(m, n);
    let mut b = vec![0.0; m];
    let mut cones = Vec::new();
    let mut row = 0;

    let n_eq = program.eq_a.nrows();
    if n_eq > 0 {
        a.rows_mut(0, n_eq).copy_from(&program.eq_a);
        b[..n_eq].copy_from_slice(program.eq_b.as_slice());
        cones.push(SupportedConeT::ZeroConeT(n_eq));
        row = n_eq;
    }
    if n_lin > 0 {
        for c in program.socs.iter().filter(|c| c.v.nrows() == 0) {
            a.row_mut(row).copy_from(&(-c.t.transpose()));
            b[row] = c.t0;
            row += 1;
        }
        for bd in &program.bounds {
            if let Some(lo) = bd.lower {
                a[(row, bd.var)] = -1.0;
                b[row] = -lo;
                row += 1;
            }
            if let Some(hi) = bd.upper {
                a[(row, bd.var)] = 1.0;
                b[row] = hi;
                row += 1;
            }
        }
        cones.push(SupportedConeT::NonnegativeConeT(n_lin));
    }
    for c in program.socs.iter().filter(|c| c.v.nrows() > 0) {
        a.row_mut(row).copy_from(&(-c.t.transpose()));
        b[row] = c.t0;
        let k = c.v.nrows();
        a.rows_mut(row + 1, k).copy_from(&(-&c.v));
        b[row + 1..row + 1 + k].copy_from_slice(c.v0.as_slice());
        cones.push(SupportedConeT::SecondOrderConeT(1 + k));
        row += 1 + k;
    }
    (a, b, cones)
}

impl ConicBackend for ClarabelBackend {
    fn solve(&self, program: &ConicProgram, tolerance: f64) -> Result<ConicSolution> {
        let start = Instant::now();
        let (p, q, _) = program.objective.quadratic_form();
        let (a, b, cones) = clarabel_data(program);
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_gap_abs(tolerance)
            .tol_gap_rel(tolerance)
            .tol_feas(tolerance)
            .tol_ktratio(tolerance.sqrt().min(1e-6))
            .presolve_enable(false)
            .build()
            .map_err(|e| DrmpcError::Config(format!("solver settings: {e:?}")))?;
        let mut solver = DefaultSolver::new(
            &dense_to_csc(&p, true),
            q.as_slice(),
            &dense_to_csc(&a, false),
            &b,
            &cones,
            settings,
        )
        .map_err(|e| DrmpcError::Config(format!("solver setup: {e}")))?;
        solver.solve();
        let sol = &solver.solution;
        let x = DVector::from_column_slice(&sol.x);
        let max_violation = program.max_violation(&x);
        let objective = program.objective.value(&x);
        let scale = 1.0 + b.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        let feasible = max_violation <= 100.0 * tolerance.max(1e-9) * scale;
        let (status, detail) = match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved if feasible => {
                (SolveStatus::Optimal, format!("{:?}", sol.status))
            }
            SolverStatus::Solved | SolverStatus::AlmostSolved => (
                SolveStatus::NumericalFailure,
                format!("{:?} but constraint violation {max_violation:.3e}", sol.status),
            ),
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                (SolveStatus::Infeasible, format!("{:?}", sol.status))
            }
            other => (SolveStatus::NumericalFailure, format!("{other:?}")),
        };
        Ok(ConicSolution {
            status,
            x,
            objective,
            iterations: sol.iterations,
            solve_time: start.elapsed(),
            max_violation,
            detail,
        })
    }
}

/// Tries the program with every cone and bound inactive before delegating.
///
/// The equality-constrained QP is solved directly; variables whose bounds it
/// violates are fixed at the bound and the QP is re-solved. The point is
/// returned only when it satisfies the KKT conditions of the full program:
/// all cones strictly satisfied and every fixed bound carrying a multiplier
/// of the right sign. Otherwise the inner backend solves the program.
#[derive(Debug, Clone, Default)]
pub struct InactiveShortcut<B> {
    pub inner: B,
}

impl<B> InactiveShortcut<B> {
    pub fn new(inner: B) -> Self {
        InactiveShortcut { inner }
    }
}

/// `min 0.5 x^T P x + q^T x` s.t. `A x = b` and `x_j = val_j` for fixed `j`.
/// Returns `x` and the Lagrangian gradient without the fixing rows.
fn equality_qp(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    fixed: &[(usize, f64)],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = p.nrows();
    let m = a.nrows();
    let k = fixed.len();
    let dim = n + m + k;
    let mut kkt = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(p);
    kkt.view_mut((n, 0), (m, n)).copy_from(a);
    kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    rhs.rows_mut(0, n).copy_from(&(-q));
    rhs.rows_mut(n, m).copy_from(b);
    for (i, (j, val)) in fixed.iter().enumerate() {
        kkt[(n + m + i, *j)] = 1.0;
        kkt[(*j, n + m + i)] = 1.0;
        rhs[n + m + i] = *val;
    }
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    let y = sol.rows(n, m).into_owned();
    let grad = p * &x + q + a.tr_mul(&y);
    Some((x, grad))
}

fn inactive_point(program: &ConicProgram, tolerance: f64) -> Option<DVector<f64>> {
    let (p, q, _) = program.objective.quadratic_form();
    let mut fixed: Vec<(usize, f64)> = Vec::new();
    for _ in 0..=program.bounds.len() {
        let (x, grad) = equality_qp(&p, &q, &program.eq_a, &program.eq_b, &fixed)?;
        if (&program.eq_a * &x - &program.eq_b).amax() > tolerance {
            return None;
        }
        let mut changed = false;
        for bd in &program.bounds {
            if let Some(&(_, val)) = fixed.iter().find(|(j, _)| *j == bd.var) {
                // Multiplier sign: at a lower bound the gradient must push
                // outward (>= 0), at an upper bound inward (<= 0).
                let g = grad[bd.var];
                let at_lower = bd.lower == Some(val);
                let at_upper = bd.upper == Some(val);
                let ok = (at_lower && g >= -tolerance) || (at_upper && g <= tolerance);
                if !ok {
                    return None;
                }
                continue;
            }
            if let Some(lo) = bd.lower.filter(|lo| x[bd.var] < *lo) {
                fixed.push((bd.var, lo));
                changed = true;
            } else if let Some(hi) = bd.upper.filter(|hi| x[bd.var] > *hi) {
                fixed.push((bd.var, hi));
                changed = true;
            }
        }
        if changed {
            continue;
        }
        return program.socs.iter().all(|c| c.margin(&x) > 0.0).then_some(x);
    }
    None
}

impl<B: ConicBackend> ConicBackend for InactiveShortcut<B> {
    fn solve(&self, program: &ConicProgram, tolerance: f64) -> Result<ConicSolution> {
        let start = Instant::now();
        if let Some(x) = inactive_point(program, tolerance) {
            return Ok(ConicSolution {
                status: SolveStatus::Optimal,
                objective: program.objective.value(&x),
                max_violation: program.max_violation(&x),
                x,
                iterations: 0,
                solve_time: start.elapsed(),
                detail: "no active inequality".into(),
            });
        }
        self.inner.solve(program, tolerance)
    }
}
