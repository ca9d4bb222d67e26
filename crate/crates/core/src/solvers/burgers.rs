use super::{AdvectionForm, Grid1D, PdeParams};
use crate::error::{Error, Result};
use crate::field::Field;

/// Exact Riemann (Godunov) flux for `u^2 / 2`.
fn godunov_flux(left: f64, right: f64) -> f64 {
    let flux = |u: f64| 0.5 * u * u;
    if left <= right {
        if left > 0.0 {
            flux(left)
        } else if right < 0.0 {
            flux(right)
        } else {
            0.0
        }
    } else {
        flux(left).max(flux(right))
    }
}

/// One explicit upwind step of `u_t + u u_x = f` on a periodic grid.
pub fn burgers_step(u: &Field, f: &Field, p: &PdeParams, grid: &Grid1D) -> Result<Field> {
    let n = grid.n_x;
    let nu = p.dt / grid.dx;
    let max_speed = u.max_abs();
    let courant = max_speed * nu;
    if courant > 1.0 || !courant.is_finite() {
        return Err(Error::Cfl { max_speed, courant });
    }
    let left = |i: usize| u[(i + n - 1) % n];
    let right = |i: usize| u[(i + 1) % n];
    let next = match p.advection {
        AdvectionForm::NonConservative => (0..n)
            .map(|i| {
                let ui = u[i];
                let slope = if ui >= 0.0 { ui - left(i) } else { right(i) - ui };
                ui - nu * ui * slope + p.dt * f[i]
            })
            .collect(),
        AdvectionForm::Conservative => {
            // flux[i] sits at the interface between i and i + 1
            let flux: Vec<f64> = (0..n).map(|i| godunov_flux(u[i], right(i))).collect();
            (0..n)
                .map(|i| u[i] - nu * (flux[i] - flux[(i + n - 1) % n]) + p.dt * f[i])
                .collect()
        }
    };
    Ok(Field(next))
}
