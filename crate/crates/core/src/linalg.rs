//! Dense linear-algebra helpers shared by the model, policy and synthesis code.

use nalgebra::{DMatrix, DVector};

use crate::error::{DrmpcError, Result};

/// Condition number above which inverses in the policy transforms are logged.
pub const CONDITION_WARNING: f64 = 1e12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue_sym(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Symmetric positive-semidefinite square root `V diag(sqrt(max(d, 0))) V^T`.
///
/// Eigenvalues below `-tol * max(1, |m|_max)` are rejected.
pub fn psd_sqrt(m: &DMatrix<f64>, tol: f64, context: &'static str) -> Result<DMatrix<f64>> {
    let sym = symmetrize(m);
    let scale = max_abs(&sym).max(1.0);
    let eig = sym.symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig < -tol * scale {
        return Err(DrmpcError::NotPsd { context, min_eig });
    }
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&d) * v.transpose())
}

/// Any factor `S` with `S S^T = m`: Cholesky when `m` is positive definite,
/// the symmetric square root otherwise.
pub fn psd_factor(m: &DMatrix<f64>, tol: f64, context: &'static str) -> Result<DMatrix<f64>> {
    let sym = symmetrize(m);
    if let Some(chol) = sym.clone().cholesky() {
        let l = chol.l();
        if l.diagonal().iter().all(|d| *d > 1e-12 * max_abs(&sym).max(1e-300).sqrt()) {
            return Ok(l);
        }
    }
    psd_sqrt(&sym, tol, context)
}

/// Moore-Penrose pseudo-inverse with singular values below
/// `rel_cutoff * sigma_max` treated as zero. Also returns the numerical rank.
pub fn pinv(m: &DMatrix<f64>, rel_cutoff: f64) -> (DMatrix<f64>, usize) {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return (DMatrix::zeros(c, r), 0);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = rel_cutoff * smax;
    let u = svd.u.as_ref().expect("svd computed with u");
    let vt = svd.v_t.as_ref().expect("svd computed with v_t");
    let mut out = DMatrix::zeros(c, r);
    let mut rank = 0;
    for (k, s) in svd.singular_values.iter().enumerate() {
        if *s > cut && *s > 0.0 {
            rank += 1;
            out += (vt.row(k).transpose() / *s) * u.column(k).transpose();
        }
    }
    (out, rank)
}

pub fn numerical_rank(m: &DMatrix<f64>, rel_cutoff: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|s| **s > rel_cutoff * smax && **s > 0.0).count()
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Inverse by LU with partial pivoting; logs a warning on poor conditioning.
pub fn lu_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let inv = m
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| DrmpcError::Transform(format!("{context}: matrix is singular")))?;
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(DrmpcError::Transform(format!(
            "{context}: inverse is not finite"
        )));
    }
    if m.nrows() <= 64 {
        let cond = condition_number(m);
        if cond > CONDITION_WARNING {
            log::warn!("{context}: condition number {cond:.3e}");
        }
    }
    Ok(inv)
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij != 0.0 {
                out.view_mut((i * br, j * bc), (br, bc))
                    .copy_from(&(b * aij));
            }
        }
    }
    out
}

/// `I_n ⊗ m`.
pub fn block_diag_repeat(m: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut out = DMatrix::zeros(r * n, c * n);
    for k in 0..n {
        out.view_mut((k * r, k * c), (r, c)).copy_from(m);
    }
    out
}

pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Solves `X = A X A^T + W` for Schur-stable `A` via the vectorized system
/// `(I - A ⊗ A) vec(X) = vec(W)`, followed by one step of iterative refinement.
pub fn discrete_lyapunov(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let rho = spectral_radius(a);
    if rho >= 1.0 {
        return Err(DrmpcError::UnstableClosedLoop(rho));
    }
    let lhs = DMatrix::identity(n * n, n * n) - kron(a, a);
    let lu = lhs.lu();
    let rhs = DVector::from_column_slice(w.as_slice());
    let mut x = lu
        .solve(&rhs)
        .ok_or_else(|| DrmpcError::Model("Lyapunov system is singular".into()))?;
    let resid = &rhs - (DMatrix::identity(n * n, n * n) - kron(a, a)) * &x;
    if let Some(dx) = lu.solve(&resid) {
        x += dx;
    }
    let sol = DMatrix::from_column_slice(n, n, x.as_slice());
    Ok(symmetrize(&sol))
}

/// Weighted squared norm `x^T m x`.
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    if r == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let c = rows[0].len();
    if rows.iter().any(|row| row.len() != c) {
        return Err(DrmpcError::Config("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
