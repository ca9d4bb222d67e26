//! Fully connected networks and the adaptive-moment optimizer used by both
//! the operator surrogate and the control policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
    Relu,
}

impl Activation {
    fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x.silu(),
            Activation::Relu => x.relu(),
        }
    }
}

/// Dense layer `y = x W + b` with `W` stored `[in x out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Fan-in scaled uniform weights `U(-sqrt(3/fan_in), sqrt(3/fan_in))`,
    /// zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], w).expect("sizes agree").with_grad(),
            bias: Tensor::zeros(&[fan_out]).with_grad(),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Multilayer perceptron with a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

/// An [`Mlp`]'s parameters recorded on one tape.
pub struct BoundMlp<'t> {
    vars: Vec<(Var<'t>, Var<'t>)>,
    activation: Activation,
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].fan_in()];
        s.extend(self.layers.iter().map(Linear::fan_out));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    /// Registers the parameters; `trainable = false` records them as
    /// constants so no gradient flows into them.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        let reg = |t: &Tensor| if trainable { tape.leaf(t) } else { tape.constant(t) };
        BoundMlp {
            vars: self.layers.iter().map(|l| (reg(&l.weight), reg(&l.bias))).collect(),
            activation: self.activation,
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients, bound: &BoundMlp<'_>) {
        for (layer, (w, b)) in self.layers.iter_mut().zip(&bound.vars) {
            grads.accumulate_into(*w, &mut layer.weight);
            grads.accumulate_into(*b, &mut layer.bias);
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn n_params(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }
}

impl<'t> BoundMlp<'t> {
    /// `x` is `[batch x input]`.
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let last = self.vars.len() - 1;
        let mut h = x;
        for (i, (w, b)) in self.vars.iter().enumerate() {
            h = h.matmul(*w)?.add_row(*b)?;
            if i < last {
                h = self.activation.apply(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Adaptive-moment optimizer over a fixed, ordered parameter list.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update from each tensor's accumulated gradient, then
    /// zeroes the gradients.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, learning_rate: f64) {
        self.step += 1;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (idx, p) in params.into_iter().enumerate() {
            if self.first.len() <= idx {
                self.first.push(vec![0.0; p.len()]);
                self.second.push(vec![0.0; p.len()]);
            }
            let Some(grad) = p.grad.take() else { continue };
            let (m, v) = (&mut self.first[idx], &mut self.second[idx]);
            for (((w, g), mi), vi) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                *w -= learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
            p.grad = Some(vec![0.0; grad.len()]);
        }
    }
}

/// Learning rate at `epoch` under cosine decay from `start` to `end`.
pub fn cosine_lr(start: f64, end: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return start;
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * t).cos())
}
