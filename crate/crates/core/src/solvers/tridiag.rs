use crate::error::{Error, Result};

/// Thomas algorithm for `A x = rhs` with `A` tridiagonal.
///
/// `lower[i]` multiplies `x[i]` in row `i + 1`; `upper[i]` multiplies
/// `x[i + 1]` in row `i`.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if rhs.len() != n || lower.len() + 1 != n.max(1) || upper.len() + 1 != n.max(1) {
        return Err(Error::Shape {
            op: "solve_tridiagonal",
            lhs: vec![lower.len(), diag.len(), upper.len()],
            rhs: vec![rhs.len()],
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut pivot = diag[0];
    if pivot == 0.0 || !pivot.is_finite() {
        return Err(Error::Singular { row: 0 });
    }
    if n > 1 {
        c[0] = upper[0] / pivot;
    }
    d[0] = rhs[0] / pivot;
    for i in 1..n {
        pivot = diag[i] - lower[i - 1] * c[i - 1];
        if pivot == 0.0 || !pivot.is_finite() {
            return Err(Error::Singular { row: i });
        }
        if i < n - 1 {
            c[i] = upper[i] / pivot;
        }
        d[i] = (rhs[i] - lower[i - 1] * d[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}
