use super::{second_difference, solve_tridiagonal, BoundaryCondition, Grid1D, PdeParams};
use crate::error::{Error, Result};
use crate::field::Field;

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITERS: usize = 50;

/// Residual history of one implicit step; `residuals[0]` is evaluated at the
/// initial guess.
#[derive(Clone, Debug, Default)]
pub struct NewtonReport {
    pub residuals: Vec<f64>,
}

impl NewtonReport {
    pub fn iterations(&self) -> usize {
        self.residuals.len().saturating_sub(1)
    }
}

/// One backward-Euler step of `u_t = alpha u_xx + r u (1 - u) - f` with
/// zero-flux boundaries.
pub fn fisher_kpp_step(u: &Field, f: &Field, p: &PdeParams, grid: &Grid1D) -> Result<Field> {
    fisher_kpp_step_with_report(u, f, p, grid).map(|(v, _)| v)
}

pub fn fisher_kpp_step_with_report(u: &Field, f: &Field, p: &PdeParams, grid: &Grid1D) -> Result<(Field, NewtonReport)> {
    let n = grid.n_x;
    let (dt, alpha, rate) = (p.dt, p.alpha, p.r);
    let k = dt * alpha / (grid.dx * grid.dx);
    let residual = |v: &[f64]| -> Vec<f64> {
        let lap = second_difference(v, grid.dx, BoundaryCondition::Neumann0);
        (0..n)
            .map(|i| v[i] - u[i] - dt * (alpha * lap[i] + rate * v[i] * (1.0 - v[i]) - f[i]))
            .collect()
    };
    // Jacobian off-diagonals are fixed; mirrored ghost points double the
    // coupling in the first and last rows.
    let mut lower = vec![-k; n - 1];
    let mut upper = vec![-k; n - 1];
    upper[0] = -2.0 * k;
    lower[n - 2] = -2.0 * k;

    let mut v = u.0.clone();
    let mut report = NewtonReport::default();
    let mut res = residual(&v);
    let mut norm = res.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    report.residuals.push(norm);
    while norm >= NEWTON_TOL {
        if report.iterations() >= NEWTON_MAX_ITERS || !norm.is_finite() {
            return Err(Error::NewtonDiverged {
                iterations: report.iterations(),
                residual: norm,
            });
        }
        let diag: Vec<f64> = v
            .iter()
            .map(|vi| 1.0 + 2.0 * k - dt * rate * (1.0 - 2.0 * vi))
            .collect();
        let delta = solve_tridiagonal(&lower, &diag, &upper, &res)?;
        v.iter_mut().zip(&delta).for_each(|(vi, d)| *vi -= d);
        res = residual(&v);
        norm = res.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        report.residuals.push(norm);
    }
    Ok((Field(v), report))
}
