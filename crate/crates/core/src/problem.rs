//! A discretized control problem: PDE, grid, actuators and the control rate.

use serde::{Deserialize, Serialize};

use crate::control::{ControlBasis, ControlBasisConfig};
use crate::error::{Error, Result};
use crate::field::{ControlAmplitudes, Field};
use crate::solvers::{FdmSolver, Grid1D, PdeParams};

/// Serializable description of a [`Problem`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub pde: PdeParams,
    pub dx: f64,
    pub basis: ControlBasisConfig,
    /// Solver steps per control step.
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    10
}

#[derive(Clone, Debug)]
pub struct Problem {
    pub cfg: ProblemConfig,
    pub grid: Grid1D,
    pub basis: ControlBasis,
    pub solver: FdmSolver,
}

impl Problem {
    pub fn new(cfg: ProblemConfig) -> Result<Self> {
        let grid = Grid1D::for_bc(cfg.dx, cfg.pde.bc)?;
        let solver = FdmSolver::new(cfg.pde.clone(), grid.clone())?;
        let basis = ControlBasis::new(&cfg.basis, &grid)?;
        if cfg.stride == 0 || cfg.pde.n_steps() % cfg.stride != 0 {
            return Err(Error::Config(format!(
                "stride {} must divide the {} solver steps",
                cfg.stride,
                cfg.pde.n_steps()
            )));
        }
        Ok(Self {
            cfg,
            grid,
            basis,
            solver,
        })
    }

    pub fn n_x(&self) -> usize {
        self.grid.n_x
    }

    pub fn n_actuators(&self) -> usize {
        self.basis.n_actuators()
    }

    pub fn a_max(&self) -> f64 {
        self.cfg.basis.a_max
    }

    pub fn stride(&self) -> usize {
        self.cfg.stride
    }

    /// Control steps per horizon.
    pub fn n_op(&self) -> usize {
        self.cfg.pde.n_steps() / self.cfg.stride
    }

    pub fn dt_op(&self) -> f64 {
        self.cfg.pde.dt * self.cfg.stride as f64
    }

    /// One control step of the reference solver with `amps` held.
    pub fn fdm_control_step(&self, u: &Field, amps: &ControlAmplitudes) -> Result<Field> {
        self.solver.advance_held(u, amps, &self.basis, self.cfg.stride)
    }
}

/// Repeats each control-rate vector `stride` times.
pub fn hold(amps: &[ControlAmplitudes], stride: usize) -> Vec<ControlAmplitudes> {
    amps.iter()
        .flat_map(|a| std::iter::repeat_n(a, stride).cloned())
        .collect()
}
