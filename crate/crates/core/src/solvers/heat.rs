use super::{solve_tridiagonal, Grid1D, PdeParams};
use crate::error::Result;
use crate::field::Field;

/// One Crank-Nicolson step of `u_t = alpha u_xx + f` with `u = 0` at both ends.
///
/// The forcing is taken at the start of the step.
pub fn heat_step(u: &Field, f: &Field, p: &PdeParams, grid: &Grid1D) -> Result<Field> {
    let n = grid.n_x;
    let r = p.alpha * p.dt / (grid.dx * grid.dx);
    let half = 0.5 * r;
    let mut lower = vec![-half; n - 1];
    let mut upper = vec![-half; n - 1];
    let mut diag = vec![1.0 + r; n];
    let mut rhs = vec![0.0; n];
    diag[0] = 1.0;
    diag[n - 1] = 1.0;
    upper[0] = 0.0;
    lower[n - 2] = 0.0;
    for i in 1..n - 1 {
        rhs[i] = u[i] + half * (u[i - 1] - 2.0 * u[i] + u[i + 1]) + p.dt * f[i];
    }
    Ok(Field(solve_tridiagonal(&lower, &diag, &upper, &rhs)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::BoundaryCondition;
    use std::f64::consts::PI;

    fn max_err_vs_analytic(dx: f64, dt: f64) -> f64 {
        let grid = Grid1D::for_bc(dx, BoundaryCondition::Dirichlet0).unwrap();
        let p = PdeParams::heat(0.1, dt, 0.1);
        let mut u = Field(grid.x.iter().map(|x| (PI * x).sin()).collect());
        let f = Field::zeros(grid.n_x);
        for _ in 0..p.n_steps() {
            u = heat_step(&u, &f, &p, &grid).unwrap();
        }
        let decay = (-0.1 * PI * PI * 0.1f64).exp();
        grid.x
            .iter()
            .zip(u.iter())
            .map(|(x, v)| (v - decay * (PI * x).sin()).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn equilibrium_is_preserved() {
        let grid = Grid1D::closed(101).unwrap();
        let p = PdeParams::heat(0.1, 1e-3, 0.4);
        let z = Field::zeros(101);
        assert_eq!(heat_step(&z, &z, &p, &grid).unwrap(), z);
    }

    #[test]
    fn decays_like_the_analytic_sine_mode() {
        // e^{-0.1 pi^2 0.1} ~= 0.90602
        assert!(((-0.1 * PI * PI * 0.1f64).exp() - 0.90602).abs() < 1e-5);
        let err = max_err_vs_analytic(0.01, 1e-3);
        assert!(err < 1e-3, "max error {err:e}");
        let finer = max_err_vs_analytic(0.005, 5e-4);
        assert!(err / finer >= 3.5, "error ratio {}", err / finer);
    }

    #[test]
    fn constant_forcing_first_step() {
        let grid = Grid1D::closed(101).unwrap();
        let p = PdeParams::heat(0.1, 1e-3, 0.4);
        let c = 7.0;
        let u = heat_step(&Field::zeros(101), &Field(vec![c; 101]), &p, &grid).unwrap();
        assert_eq!(u[0], 0.0);
        assert_eq!(u[100], 0.0);
        // away from the walls the implicit diffusion of the uniform profile vanishes
        for v in &u[20..81] {
            assert!((v - p.dt * c).abs() < p.dt * p.dt * c, "{v}");
        }
    }
}
