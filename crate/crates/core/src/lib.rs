//! Differentiable predictive control of 1-D PDEs through a learned
//! time-integrated operator surrogate.
//!
//! The crate bundles everything the pipeline needs: a small reverse-mode
//! autodiff engine, finite-difference reference solvers, Gaussian random
//! field sampling, the dual-branch operator, the control policy and the
//! closed-loop evaluation.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod control;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod field;
pub mod grf;
pub mod nn;
pub mod operator;
pub mod pipeline;
pub mod policy;
pub mod problem;
pub mod rng;
pub mod solvers;

pub use error::{Error, Result};
pub use field::{ControlAmplitudes, Field, Trajectory};

/// Version string embedded in every artifact.
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
