//! Small dense linear-algebra helpers shared by the GP code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::{Error, Result};

/// Diagonal jitter added, in order, when a factorization fails.
pub const JITTER_LADDER: [f64; 3] = [1e-10, 1e-8, 1e-6];

/// Runs `attempt` with zero jitter and then with each rung of
/// [`JITTER_LADDER`] until it succeeds. Returns the result and the jitter used.
pub fn with_jitter<T>(mut attempt: impl FnMut(f64) -> Option<T>) -> Result<(T, f64)> {
    let mut tried = Vec::with_capacity(JITTER_LADDER.len() + 1);
    for jitter in std::iter::once(0.0).chain(JITTER_LADDER) {
        tried.push(jitter);
        if let Some(out) = attempt(jitter) {
            return Ok((out, jitter));
        }
    }
    Err(Error::NotPositiveDefinite { attempted: tried })
}

/// Lower Cholesky factor of `m + jitter * I`, or `None` when not positive definite.
pub fn cholesky_lower(m: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let mut a = m.clone();
    if jitter > 0.0 {
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
    }
    let chol: Cholesky<f64, Dyn> = Cholesky::new(a)?;
    let l = chol.unpack();
    if l.diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
        Some(l)
    } else {
        None
    }
}

/// Lower Cholesky factor with jitter escalation.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    with_jitter(|j| cholesky_lower(m, j))
}

/// Solves `L x = b` in place.
pub fn solve_lower_mut(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    if l.nrows() > 0 {
        let ok = l.solve_lower_triangular_mut(b);
        debug_assert!(ok);
    }
}

/// Solves `Lᵀ x = b` in place.
pub fn solve_upper_t_mut(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    if l.nrows() > 0 {
        let ok = l.tr_solve_lower_triangular_mut(b);
        debug_assert!(ok);
    }
}

pub fn solve_lower_vec_mut(l: &DMatrix<f64>, b: &mut DVector<f64>) {
    if l.nrows() > 0 {
        let ok = l.solve_lower_triangular_mut(b);
        debug_assert!(ok);
    }
}

pub fn solve_upper_t_vec_mut(l: &DMatrix<f64>, b: &mut DVector<f64>) {
    if l.nrows() > 0 {
        let ok = l.tr_solve_lower_triangular_mut(b);
        debug_assert!(ok);
    }
}

/// Solves `L Lᵀ x = b` given the lower factor.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = b.clone();
    solve_lower_mut(l, &mut x);
    solve_upper_t_mut(l, &mut x);
    x
}

pub fn cholesky_solve_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut x = b.clone();
    solve_lower_vec_mut(l, &mut x);
    solve_upper_t_vec_mut(l, &mut x);
    x
}

/// `log |L Lᵀ|`.
pub fn cholesky_log_det(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Forward substitution for a single right-hand side stored in a slice.
///
/// This is the innermost loop of GP prediction, so it avoids allocating.
pub fn forward_substitute(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = l.nrows();
    debug_assert_eq!(b.len(), n);
    // Column-oriented sweep matches nalgebra's column-major storage.
    for j in 0..n {
        let xj = b[j] / l[(j, j)];
        b[j] = xj;
        if xj != 0.0 {
            let col = l.column(j);
            for i in (j + 1)..n {
                b[i] -= col[i] * xj;
            }
        }
    }
}

/// Symmetrizes a matrix in place by averaging with its transpose.
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
