//! Gaussian actuator basis and excitation signals for data generation.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ControlAmplitudes, Field};
use crate::rng::stream_rng;
use crate::solvers::Grid1D;

/// Distribution constants of the perturbed-sinusoid excitation
/// `A sin(2 pi w t/T + phi) + eps`, all relative to `a_max` where scaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcitationConfig {
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    /// Cycles per horizon.
    pub frequency_min: f64,
    pub frequency_max: f64,
    pub noise_std: f64,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        Self {
            amplitude_min: 0.3,
            amplitude_max: 1.0,
            frequency_min: 0.5,
            frequency_max: 3.0,
            noise_std: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBasisConfig {
    /// Actuator centers `mu_i`.
    pub centers: Vec<f64>,
    /// Spatial spread `sigma`.
    pub sigma: f64,
    pub a_max: f64,
    #[serde(default)]
    pub excitation: ExcitationConfig,
}

impl ControlBasisConfig {
    pub fn heat() -> Self {
        Self {
            centers: vec![0.2, 0.4, 0.6, 0.8],
            sigma: 0.1,
            a_max: 40.0,
            excitation: ExcitationConfig::default(),
        }
    }

    pub fn burgers() -> Self {
        Self {
            centers: vec![0.3, 0.6],
            sigma: 0.15,
            a_max: 10.0,
            excitation: ExcitationConfig::default(),
        }
    }

    pub fn fisher_kpp() -> Self {
        Self {
            a_max: 10.0,
            ..Self::heat()
        }
    }

    pub fn n_actuators(&self) -> usize {
        self.centers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::Config("at least one actuator is required".into()));
        }
        if self.centers.iter().any(|&c| !(c > 0.0 && c < 1.0)) {
            return Err(Error::Config("actuator centers must lie strictly inside (0, 1)".into()));
        }
        if self.centers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("actuator centers must be sorted and distinct".into()));
        }
        if !(self.sigma > 0.0 && self.a_max > 0.0) {
            return Err(Error::Config("sigma and a_max must be positive".into()));
        }
        let e = &self.excitation;
        if !(0.0 <= e.amplitude_min && e.amplitude_min <= e.amplitude_max)
            || !(0.0 <= e.frequency_min && e.frequency_min <= e.frequency_max)
            || e.noise_std < 0.0
        {
            return Err(Error::Config("invalid excitation ranges".into()));
        }
        Ok(())
    }
}

/// Actuator shapes sampled on a grid, `[n_actuators x n_x]` row-major.
#[derive(Clone, Debug)]
pub struct ControlBasis {
    n_actuators: usize,
    n_x: usize,
    shapes: Vec<f64>,
}

impl ControlBasis {
    pub fn new(cfg: &ControlBasisConfig, grid: &Grid1D) -> Result<Self> {
        cfg.validate()?;
        let two_s2 = 2.0 * cfg.sigma * cfg.sigma;
        let shapes = cfg
            .centers
            .iter()
            .flat_map(|mu| grid.x.iter().map(move |x| (-(x - mu).powi(2) / two_s2).exp()))
            .collect();
        Ok(Self {
            n_actuators: cfg.n_actuators(),
            n_x: grid.n_x,
            shapes,
        })
    }

    pub fn n_actuators(&self) -> usize {
        self.n_actuators
    }

    pub fn shape(&self, actuator: usize) -> &[f64] {
        &self.shapes[actuator * self.n_x..(actuator + 1) * self.n_x]
    }

    /// `f(x) = sum_i a_i exp(-(x - mu_i)^2 / (2 sigma^2))`.
    pub fn assemble(&self, amps: &ControlAmplitudes) -> Result<Field> {
        if amps.len() != self.n_actuators {
            return Err(Error::Shape {
                op: "assemble_control_field",
                lhs: vec![amps.len()],
                rhs: vec![self.n_actuators],
            });
        }
        let mut f = vec![0.0; self.n_x];
        for (i, a) in amps.iter().enumerate() {
            f.iter_mut().zip(self.shape(i)).for_each(|(fx, g)| *fx += a * g);
        }
        Ok(Field(f))
    }
}

pub fn assemble_control_field(amps: &ControlAmplitudes, cfg: &ControlBasisConfig, grid: &Grid1D) -> Result<Field> {
    ControlBasis::new(cfg, grid)?.assemble(amps)
}

/// Perturbed sinusoids, one per actuator, sampled at `n_steps` instants
/// uniformly covering one horizon and clipped to `[-a_max, a_max]`.
pub fn generate_training_amplitudes(cfg: &ControlBasisConfig, n_steps: usize, rng_seed: u64) -> Vec<ControlAmplitudes> {
    generate_amplitudes_with(cfg, n_steps, &mut stream_rng(rng_seed, 0))
}

pub(crate) fn generate_amplitudes_with(cfg: &ControlBasisConfig, n_steps: usize, rng: &mut impl Rng) -> Vec<ControlAmplitudes> {
    let e = &cfg.excitation;
    let a_max = cfg.a_max;
    let noise = Normal::new(0.0, e.noise_std * a_max).expect("noise std is nonnegative");
    let waves: Vec<(f64, f64, f64)> = (0..cfg.n_actuators())
        .map(|_| {
            let amp = rng.random_range(e.amplitude_min..=e.amplitude_max) * a_max;
            let freq = rng.random_range(e.frequency_min..=e.frequency_max);
            let phase = rng.random_range(0.0..2.0 * PI);
            (amp, freq, phase)
        })
        .collect();
    (0..n_steps)
        .map(|k| {
            let t = k as f64 / n_steps as f64;
            ControlAmplitudes(
                waves
                    .iter()
                    .map(|&(amp, freq, phase)| {
                        let v = amp * (2.0 * PI * freq * t + phase).sin() + noise.sample(rng);
                        v.clamp(-a_max, a_max)
                    })
                    .collect(),
            )
        })
        .collect()
}
