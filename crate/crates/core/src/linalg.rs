//! Small dense linear-algebra helpers shared by every recursion.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub const LOG_2PI: f64 = 1.837_877_066_409_345_3;

/// Smallest and largest relative jitter tried before a Cholesky is declared failed.
const JITTER_START: f64 = 1e-12;
const JITTER_STOP: f64 = 1e-6;

/// Replaces `m` with `(m + m') / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

/// Cholesky factorization with additive jitter escalation.
///
/// Tries the matrix as given, then adds `eps * trace/m * I` for
/// `eps = 1e-12, 1e-11, ..., 1e-6`.
pub fn cholesky(a: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite(format!("{what}: non-finite entries")));
    }
    if let Some(ch) = Cholesky::new(a.clone()) {
        return Ok(ch);
    }
    let m = a.nrows().max(1) as f64;
    let scale = {
        let t = a.trace() / m;
        if t > 0.0 {
            t
        } else {
            1.0
        }
    };
    let mut eps = JITTER_START;
    while eps <= JITTER_STOP * (1.0 + 1e-9) {
        let mut b = a.clone();
        for i in 0..a.nrows() {
            b[(i, i)] += eps * scale;
        }
        if let Some(ch) = Cholesky::new(b) {
            return Ok(ch);
        }
        eps *= 10.0;
    }
    Err(Error::NotPositiveDefinite(what.to_string()))
}

/// `log |A|` from a Cholesky factor.
pub fn logdet(ch: &Cholesky<f64, Dyn>) -> f64 {
    let l = ch.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// The weighted norm `‖x‖²_A := x' A⁻¹ x` (note: the subscript matrix is inverted).
pub fn norm_sq_inv(a: &DMatrix<f64>, x: &DVector<f64>, what: &str) -> Result<f64> {
    let ch = cholesky(a, what)?;
    Ok(norm_sq_inv_chol(&ch, x))
}

/// `x' A⁻¹ x` given the Cholesky factor of `A`.
pub fn norm_sq_inv_chol(ch: &Cholesky<f64, Dyn>, x: &DVector<f64>) -> f64 {
    let mut w = x.clone();
    ch.l_dirty()
        .solve_lower_triangular_mut(&mut w);
    w.norm_squared()
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrized(cholesky(a, what)?.inverse()))
}

/// A factor `Γ` with `P = Γ Γ'` for a positive semidefinite `P`.
///
/// Uses Cholesky when it succeeds without jitter and falls back to a clamped
/// eigendecomposition otherwise, so exactly singular covariances (a Dirac
/// state, for instance) are represented without perturbation.
pub fn psd_factor(p: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = Cholesky::new(p.clone()) {
        return ch.unpack();
    }
    let eig = symmetrized(p.clone()).symmetric_eigen();
    let mut f = eig.eigenvectors.clone();
    for (j, lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        for i in 0..f.nrows() {
            f[(i, j)] *= s;
        }
    }
    f
}

/// Checks that `a` is symmetric within `tol` (absolute, scaled by the max entry).
pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    let scale = a.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            if (a[(i, j)] - a[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

/// `log Σ exp(x)`; returns `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights in place and returns their log-sum.
pub fn normalize_log(xs: &mut [f64]) -> f64 {
    let z = log_sum_exp(xs);
    if z.is_finite() {
        for x in xs.iter_mut() {
            *x -= z;
        }
    }
    z
}

/// Safe `ln` of a probability, mapping 0 to `-inf`.
pub fn ln_prob(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Builds a matrix from row-major nested vectors.
pub fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Validation(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
