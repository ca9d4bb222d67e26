//! Finite-difference reference solvers for the three model problems.
//!
//! | kind       | boundary     | scheme                                  |
//! |------------|--------------|-----------------------------------------|
//! | heat       | Dirichlet 0  | Crank-Nicolson, forcing explicit        |
//! | Burgers    | periodic     | first-order upwind, explicit            |
//! | Fisher-KPP | Neumann 0    | backward Euler with Newton iterations   |

mod burgers;
mod fisher_kpp;
mod heat;
mod tridiag;

pub use burgers::burgers_step;
pub use fisher_kpp::{fisher_kpp_step, fisher_kpp_step_with_report, NewtonReport};
pub use heat::heat_step;
pub use tridiag::solve_tridiagonal;

use serde::{Deserialize, Serialize};

use crate::control::ControlBasis;
use crate::error::{Error, Result};
use crate::field::{ControlAmplitudes, Field, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdeKind {
    Heat,
    Burgers,
    FisherKpp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    Dirichlet0,
    Periodic,
    Neumann0,
}

/// Discretization of the advection term in Burgers' equation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvectionForm {
    /// `u * du/dx` with the one-sided difference picked by the sign of `u`.
    #[default]
    NonConservative,
    /// Godunov flux for `(u^2/2)_x`; conserves the discrete total exactly.
    Conservative,
}

/// Uniform grid on `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid1D {
    pub n_x: usize,
    pub dx: f64,
    pub x: Vec<f64>,
    /// Periodic grids omit the duplicate endpoint `x = 1`.
    pub periodic: bool,
}

impl Grid1D {
    /// Grid including both endpoints.
    pub fn closed(n_x: usize) -> Result<Self> {
        if n_x < 2 {
            return Err(Error::Config(format!("grid needs at least 2 points, got {n_x}")));
        }
        let dx = 1.0 / (n_x - 1) as f64;
        Ok(Self {
            n_x,
            dx,
            x: (0..n_x).map(|i| i as f64 * dx).collect(),
            periodic: false,
        })
    }

    /// One period of `[0, 1)`.
    pub fn periodic(n_x: usize) -> Result<Self> {
        if n_x < 2 {
            return Err(Error::Config(format!("grid needs at least 2 points, got {n_x}")));
        }
        let dx = 1.0 / n_x as f64;
        Ok(Self {
            n_x,
            dx,
            x: (0..n_x).map(|i| i as f64 * dx).collect(),
            periodic: true,
        })
    }

    /// Grid with spacing `dx` suited to the boundary condition.
    pub fn for_bc(dx: f64, bc: BoundaryCondition) -> Result<Self> {
        if !(dx > 0.0 && dx < 1.0) {
            return Err(Error::Config(format!("grid spacing must lie in (0, 1), got {dx}")));
        }
        let cells = (1.0 / dx).round() as usize;
        if ((cells as f64) * dx - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("1/dx must be an integer, got dx = {dx}")));
        }
        match bc {
            BoundaryCondition::Periodic => Self::periodic(cells),
            _ => Self::closed(cells + 1),
        }
    }
}

/// Physical and temporal parameters of one PDE problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeParams {
    pub kind: PdeKind,
    /// Diffusivity (unused for Burgers).
    #[serde(default)]
    pub alpha: f64,
    /// Reaction rate (Fisher-KPP only).
    #[serde(default)]
    pub r: f64,
    pub bc: BoundaryCondition,
    pub dt: f64,
    /// Final time `T`.
    pub horizon: f64,
    #[serde(default)]
    pub advection: AdvectionForm,
}

impl PdeParams {
    pub fn heat(alpha: f64, dt: f64, horizon: f64) -> Self {
        Self {
            kind: PdeKind::Heat,
            alpha,
            r: 0.0,
            bc: BoundaryCondition::Dirichlet0,
            dt,
            horizon,
            advection: AdvectionForm::default(),
        }
    }

    pub fn burgers(dt: f64, horizon: f64) -> Self {
        Self {
            kind: PdeKind::Burgers,
            alpha: 0.0,
            r: 0.0,
            bc: BoundaryCondition::Periodic,
            dt,
            horizon,
            advection: AdvectionForm::default(),
        }
    }

    pub fn fisher_kpp(alpha: f64, r: f64, dt: f64, horizon: f64) -> Self {
        Self {
            kind: PdeKind::FisherKpp,
            alpha,
            r,
            bc: BoundaryCondition::Neumann0,
            dt,
            horizon,
            advection: AdvectionForm::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pair_ok = matches!(
            (self.kind, self.bc),
            (PdeKind::Heat, BoundaryCondition::Dirichlet0)
                | (PdeKind::Burgers, BoundaryCondition::Periodic)
                | (PdeKind::FisherKpp, BoundaryCondition::Neumann0)
        );
        if !pair_ok {
            return Err(Error::Config(format!(
                "boundary condition {:?} is not supported for {:?}",
                self.bc, self.kind
            )));
        }
        if !(self.dt > 0.0 && self.horizon > 0.0) {
            return Err(Error::Config("dt and horizon must be positive".into()));
        }
        let steps = self.horizon / self.dt;
        if (steps - steps.round()).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "horizon {} is not an integer multiple of dt {}",
                self.horizon, self.dt
            )));
        }
        if self.kind != PdeKind::Burgers && self.alpha < 0.0 {
            return Err(Error::Config("diffusivity must be nonnegative".into()));
        }
        Ok(())
    }

    /// Number of solver steps `T / dt`.
    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// One-step dispatcher with finiteness checking.
#[derive(Clone, Debug)]
pub struct FdmSolver {
    pub params: PdeParams,
    pub grid: Grid1D,
}

impl FdmSolver {
    pub fn new(params: PdeParams, grid: Grid1D) -> Result<Self> {
        params.validate()?;
        if grid.periodic != (params.bc == BoundaryCondition::Periodic) {
            return Err(Error::Config("grid periodicity does not match the boundary condition".into()));
        }
        Ok(Self { params, grid })
    }

    /// Advances `u` by one `dt` under the forcing field `f`.
    pub fn step(&self, u: &Field, f: &Field) -> Result<Field> {
        if u.len() != self.grid.n_x || f.len() != self.grid.n_x {
            return Err(Error::Shape {
                op: "fdm_step",
                lhs: vec![u.len(), f.len()],
                rhs: vec![self.grid.n_x],
            });
        }
        let next = match self.params.kind {
            PdeKind::Heat => heat_step(u, f, &self.params, &self.grid)?,
            PdeKind::Burgers => burgers_step(u, f, &self.params, &self.grid)?,
            PdeKind::FisherKpp => fisher_kpp_step(u, f, &self.params, &self.grid)?,
        };
        if !next.is_finite() {
            return Err(Error::NonFinite { step: 0 });
        }
        Ok(next)
    }

    /// Advances `steps` fine steps holding `amps` constant.
    pub fn advance_held(&self, u: &Field, amps: &ControlAmplitudes, basis: &ControlBasis, steps: usize) -> Result<Field> {
        let f = basis.assemble(amps)?;
        let mut u = u.clone();
        for s in 0..steps {
            u = self.step(&u, &f).map_err(|e| e.at_step(s))?;
        }
        Ok(u)
    }
}

/// Rolls the reference solver over a fine-rate amplitude sequence.
pub fn rollout_fdm(u0: &Field, amplitudes: &[ControlAmplitudes], solver: &FdmSolver, basis: &ControlBasis) -> Result<Trajectory> {
    let n = solver.params.n_steps();
    if amplitudes.len() != n {
        return Err(Error::Config(format!(
            "expected {n} amplitude vectors (T/dt), got {}",
            amplitudes.len()
        )));
    }
    let mut traj = Trajectory::new(u0.clone());
    let mut cached: Option<(&ControlAmplitudes, Field)> = None;
    for (k, amps) in amplitudes.iter().enumerate() {
        let f = match &cached {
            Some((prev, f)) if *prev == amps => f.clone(),
            _ => basis.assemble(amps)?,
        };
        let next = solver
            .step(traj.terminal(), &f)
            .map_err(|e| e.at_step(k))?;
        cached = Some((amps, f));
        traj.push(amps.clone(), next);
    }
    Ok(traj)
}

/// Second-difference operator with the boundary closure of `bc`, applied to
/// `u`. Dirichlet rows are zero.
pub fn second_difference(u: &[f64], dx: f64, bc: BoundaryCondition) -> Vec<f64> {
    let n = u.len();
    let h2 = dx * dx;
    (0..n)
        .map(|i| match bc {
            BoundaryCondition::Periodic => {
                let l = u[(i + n - 1) % n];
                let r = u[(i + 1) % n];
                (l - 2.0 * u[i] + r) / h2
            }
            BoundaryCondition::Dirichlet0 => {
                if i == 0 || i == n - 1 {
                    0.0
                } else {
                    (u[i - 1] - 2.0 * u[i] + u[i + 1]) / h2
                }
            }
            BoundaryCondition::Neumann0 => {
                let l = if i == 0 { u[1] } else { u[i - 1] };
                let r = if i == n - 1 { u[n - 2] } else { u[i + 1] };
                (l - 2.0 * u[i] + r) / h2
            }
        })
        .collect()
}
