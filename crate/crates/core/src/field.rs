use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

/// Solution values on the grid at one time instant.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Field(pub Vec<f64>);

/// Per-actuator forcing amplitudes at one control instant.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ControlAmplitudes(pub Vec<f64>);

macro_rules! vec_newtype {
    ($t:ty) => {
        impl Deref for $t {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl DerefMut for $t {
            fn deref_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }

        impl From<Vec<f64>> for $t {
            fn from(v: Vec<f64>) -> Self {
                Self(v)
            }
        }
    };
}

vec_newtype!(Field);
vec_newtype!(ControlAmplitudes);

impl Field {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl ControlAmplitudes {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }
}

/// Time-indexed states and the amplitudes applied between them.
///
/// `amplitudes[k]` drives the step from `fields[k]` to `fields[k + 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub fields: Vec<Field>,
    pub amplitudes: Vec<ControlAmplitudes>,
    /// Seed the sample was generated from, when it came from a dataset.
    pub seed: Option<u64>,
}

impl Trajectory {
    pub fn new(u0: Field) -> Self {
        Self {
            fields: vec![u0],
            amplitudes: Vec::new(),
            seed: None,
        }
    }

    pub fn push(&mut self, amps: ControlAmplitudes, next: Field) {
        self.amplitudes.push(amps);
        self.fields.push(next);
    }

    pub fn n_steps(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn terminal(&self) -> &Field {
        self.fields.last().expect("trajectory holds at least the initial field")
    }

    /// Every `stride`-th field, starting at the first.
    pub fn subsample(&self, stride: usize) -> Trajectory {
        let stride = stride.max(1);
        Trajectory {
            fields: self.fields.iter().step_by(stride).cloned().collect(),
            amplitudes: self.amplitudes.iter().step_by(stride).cloned().collect(),
            seed: self.seed,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.fields.len() == self.amplitudes.len() + 1 && self.fields.iter().all(Field::is_finite)
    }
}
