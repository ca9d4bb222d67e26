//! Zero-mean Gaussian random fields with a squared-exponential kernel.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::rng::stream_rng;
use crate::solvers::Grid1D;

const JITTER_RETRIES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrfConfig {
    pub length_scale: f64,
    pub variance: f64,
    /// Diagonal regularization; defaults to `1e-10 * variance`.
    #[serde(default)]
    pub jitter: Option<f64>,
    /// Multiply samples by `sin(pi x)` so both endpoints vanish.
    #[serde(default)]
    pub taper: bool,
    /// Remove the linear trend between `x = 0` and `x = 1` so samples on a
    /// periodic grid have no wrap-around jump.
    #[serde(default)]
    pub periodic_projection: bool,
}

impl GrfConfig {
    pub fn new(length_scale: f64, variance: f64) -> Self {
        Self {
            length_scale,
            variance,
            jitter: None,
            taper: false,
            periodic_projection: false,
        }
    }

    pub fn jitter(&self) -> f64 {
        self.jitter.unwrap_or(1e-10 * self.variance)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale > 0.0 && self.variance > 0.0) {
            return Err(Error::Config("GRF length scale and variance must be positive".into()));
        }
        let j = self.jitter();
        if !(0.0..=1e-6 * self.variance).contains(&j) {
            return Err(Error::Config(format!("GRF jitter {j} outside [0, 1e-6 * variance]")));
        }
        Ok(())
    }

    pub fn kernel(&self, a: f64, b: f64) -> f64 {
        let d = a - b;
        self.variance * (-d * d / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

fn sample_points(cfg: &GrfConfig, grid: &Grid1D) -> Vec<f64> {
    let mut x = grid.x.clone();
    if cfg.periodic_projection && grid.periodic {
        x.push(1.0);
    }
    x
}

fn kernel_on(cfg: &GrfConfig, x: &[f64], jitter: f64) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| {
        cfg.kernel(x[i], x[j]) + if i == j { jitter } else { 0.0 }
    })
}

/// `K[i][j] = k(x_i, x_j)` plus the configured jitter on the diagonal.
pub fn rbf_kernel_matrix(cfg: &GrfConfig, grid: &Grid1D) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    if grid.n_x < 2 {
        return Err(Error::Config("GRF grid needs at least 2 points".into()));
    }
    Ok(kernel_on(cfg, &grid.x, cfg.jitter()))
}

/// Cached Cholesky factor for repeated sampling on one grid.
#[derive(Clone, Debug)]
pub struct GrfSampler {
    cfg: GrfConfig,
    points: Vec<f64>,
    lower: DMatrix<f64>,
    /// Jitter that made the factorization succeed.
    pub jitter_used: f64,
    n_x: usize,
}

impl GrfSampler {
    pub fn new(cfg: &GrfConfig, grid: &Grid1D) -> Result<Self> {
        cfg.validate()?;
        if grid.n_x < 2 {
            return Err(Error::Config("GRF grid needs at least 2 points".into()));
        }
        let points = sample_points(cfg, grid);
        let mut jitter = cfg.jitter();
        for _ in 0..=JITTER_RETRIES {
            if let Some(chol) = kernel_on(cfg, &points, jitter).cholesky() {
                return Ok(Self {
                    cfg: cfg.clone(),
                    points,
                    lower: chol.l(),
                    jitter_used: jitter,
                    n_x: grid.n_x,
                });
            }
            jitter = if jitter == 0.0 { 1e-12 * cfg.variance } else { 2.0 * jitter };
        }
        Err(Error::Config(format!(
            "kernel with length scale {} is not factorizable on this grid",
            cfg.length_scale
        )))
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn sample(&self, rng_seed: u64) -> Field {
        self.sample_with(&mut stream_rng(rng_seed, 0))
    }

    pub fn sample_with(&self, rng: &mut impl Rng) -> Field {
        let n = self.points.len();
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let v = &self.lower * z;
        let mut out: Vec<f64> = v.iter().copied().collect();
        if out.len() > self.n_x {
            // periodic projection: drop the trend, then the duplicate endpoint
            let jump = out[n - 1] - out[0];
            for (u, x) in out.iter_mut().zip(&self.points) {
                *u -= jump * x;
            }
            out.truncate(self.n_x);
        }
        if self.cfg.taper {
            for (u, x) in out.iter_mut().zip(&self.points) {
                *u *= (std::f64::consts::PI * x).sin();
            }
        }
        Field(out)
    }
}

/// One field drawn from `GRF(cfg)` with its own seed.
pub fn sample_grf(cfg: &GrfConfig, grid: &Grid1D, rng_seed: u64) -> Result<Field> {
    Ok(GrfSampler::new(cfg, grid)?.sample(rng_seed))
}
