//! Dual-branch time-integrated DeepONet surrogate.
//!
//! The network predicts `du/dt` at every grid point,
//!
//! ```text
//! G(u, a)(x) = sum_j [b^u_j(u) * b^a_j(a)] t_j(x)
//! ```
//!
//! and states are advanced with classical RK4, holding the amplitudes fixed
//! over the four stages.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::field::{ControlAmplitudes, Field, Trajectory};
use crate::nn::{cosine_lr, Activation, Adam, AdamConfig, BoundMlp, Mlp};
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorArch {
    /// Hidden width of both branches and the trunk.
    pub width: usize,
    /// Number of hidden layers.
    pub depth: usize,
    /// Latent basis size `p`.
    pub p: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl Default for OperatorArch {
    fn default() -> Self {
        Self {
            width: 128,
            depth: 3,
            p: 64,
            activation: Activation::Tanh,
        }
    }
}

/// Per-point affine maps between physical and network units.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub amp_scale: f64,
    pub deriv_mean: Vec<f64>,
    pub deriv_std: Vec<f64>,
}

fn floored(std: &[f64]) -> Vec<f64> {
    let mean = std.iter().sum::<f64>() / std.len().max(1) as f64;
    let floor = if mean > 0.0 { 1e-3 * mean } else { 1.0 };
    std.iter().map(|s| s.max(floor)).collect()
}

impl Normalization {
    pub fn identity(n_x: usize, amp_scale: f64) -> Self {
        Self {
            state_mean: vec![0.0; n_x],
            state_std: vec![1.0; n_x],
            amp_scale,
            deriv_mean: vec![0.0; n_x],
            deriv_std: vec![1.0; n_x],
        }
    }

    /// Statistics over operator-rate states and finite-difference
    /// derivatives of the given trajectories.
    pub fn from_trajectories<'a>(trajs: impl IntoIterator<Item = &'a Trajectory> + Clone, dt_op: f64, amp_scale: f64) -> Result<Self> {
        let first = trajs
            .clone()
            .into_iter()
            .next()
            .ok_or_else(|| Error::Config("normalization needs at least one trajectory".into()))?;
        let n_x = first.fields[0].len();
        let (mut s1, mut s2, mut d1, mut d2) = (vec![0.0; n_x], vec![0.0; n_x], vec![0.0; n_x], vec![0.0; n_x]);
        let (mut ns, mut nd) = (0usize, 0usize);
        for t in trajs {
            for f in &t.fields {
                for i in 0..n_x {
                    s1[i] += f[i];
                    s2[i] += f[i] * f[i];
                }
                ns += 1;
            }
            for w in t.fields.windows(2) {
                for i in 0..n_x {
                    let d = (w[1][i] - w[0][i]) / dt_op;
                    d1[i] += d;
                    d2[i] += d * d;
                }
                nd += 1;
            }
        }
        let moments = |sum: &[f64], sq: &[f64], n: usize| -> (Vec<f64>, Vec<f64>) {
            let n = n.max(1) as f64;
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let std = sq
                .iter()
                .zip(&mean)
                .map(|(q, m)| (q / n - m * m).max(0.0).sqrt())
                .collect();
            (mean, std)
        };
        let (state_mean, state_std) = moments(&s1, &s2, ns);
        let (deriv_mean, deriv_std) = moments(&d1, &d2, nd);
        Ok(Self {
            state_mean,
            state_std: floored(&state_std),
            amp_scale,
            deriv_mean,
            deriv_std,
        })
    }

    pub fn normalize(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Trainable surrogate `G_theta`.
#[derive(Clone, Debug)]
pub struct OperatorModel {
    pub arch: OperatorArch,
    pub state_branch: Mlp,
    pub control_branch: Mlp,
    pub trunk: Mlp,
    pub norm: Normalization,
    /// Query coordinates of the trunk (the grid).
    pub grid_x: Vec<f64>,
    trunk_cache: OnceLock<Tensor>,
}

impl PartialEq for OperatorModel {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.state_branch == other.state_branch
            && self.control_branch == other.control_branch
            && self.trunk == other.trunk
            && self.norm == other.norm
            && self.grid_x == other.grid_x
    }
}

/// An operator's parameters and constants recorded on one tape.
pub struct BoundOperator<'t> {
    state: BoundMlp<'t>,
    control: BoundMlp<'t>,
    /// Trunk outputs on the grid, `[p x n_x]`.
    trunk_t: Var<'t>,
    neg_mean: Var<'t>,
    inv_std: Var<'t>,
    inv_amp: f64,
    deriv_mean: Var<'t>,
    deriv_std: Var<'t>,
}

fn row<'t>(tape: &'t Tape, v: &[f64]) -> Var<'t> {
    tape.constant(&Tensor::vector(v.to_vec()))
}

impl OperatorModel {
    pub fn new(arch: OperatorArch, grid_x: Vec<f64>, n_actuators: usize, norm: Normalization, rng_seed: u64) -> Self {
        let mut rng = stream_rng(rng_seed, 0);
        let n_x = grid_x.len();
        let hidden = vec![arch.width; arch.depth];
        let sizes = |input: usize| {
            let mut s = vec![input];
            s.extend(&hidden);
            s.push(arch.p);
            s
        };
        let state_branch = Mlp::new(&sizes(n_x), arch.activation, &mut rng);
        let control_branch = Mlp::new(&sizes(n_actuators), arch.activation, &mut rng);
        let trunk = Mlp::new(&sizes(1), arch.activation, &mut rng);
        Self {
            arch,
            state_branch,
            control_branch,
            trunk,
            norm,
            grid_x,
            trunk_cache: OnceLock::new(),
        }
    }

    /// Reassembles a model from stored parts.
    pub fn from_parts(arch: OperatorArch, state_branch: Mlp, control_branch: Mlp, trunk: Mlp, norm: Normalization, grid_x: Vec<f64>) -> Self {
        Self {
            arch,
            state_branch,
            control_branch,
            trunk,
            norm,
            grid_x,
            trunk_cache: OnceLock::new(),
        }
    }

    pub fn n_x(&self) -> usize {
        self.grid_x.len()
    }

    pub fn n_actuators(&self) -> usize {
        self.control_branch.input_dim()
    }

    fn trunk_values<'t>(&self, tape: &'t Tape, bound: &BoundMlp<'t>) -> Result<Var<'t>> {
        // trunk sees x mapped onto [-1, 1]
        let z: Vec<f64> = self.grid_x.iter().map(|x| 2.0 * x - 1.0).collect();
        let zeta = tape.constant_from(vec![self.n_x(), 1], z)?;
        bound.forward(zeta)?.transpose()
    }

    /// Trunk outputs on the fixed grid, `[p x n_x]`, computed once per model.
    pub fn trunk_matrix(&self) -> &Tensor {
        self.trunk_cache.get_or_init(|| {
            let tape = Tape::new();
            let bound = self.trunk.bind(&tape, false);
            self.trunk_values(&tape, &bound)
                .expect("trunk shapes are fixed at construction")
                .value()
        })
    }

    /// Adds the gradients of a trainable binding into the parameters.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &BoundOperator<'_>, trunk: Option<&BoundMlp<'_>>) {
        self.state_branch.accumulate(grads, &bound.state);
        self.control_branch.accumulate(grads, &bound.control);
        if let Some(t) = trunk {
            self.trunk.accumulate(grads, t);
        }
    }

    /// All parameters: state branch, control branch, trunk.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.state_branch
            .params_mut()
            .chain(self.control_branch.params_mut())
            .chain(self.trunk.params_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.state_branch.params().chain(self.control_branch.params()).chain(self.trunk.params())
    }

    /// Drops the cached trunk after a parameter update.
    pub fn invalidate_cache(&mut self) {
        self.trunk_cache = OnceLock::new();
    }

    /// Records the parameters. With `trainable = false` the trunk comes from
    /// the cache and nothing is differentiated with respect to `theta`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<(BoundOperator<'t>, Option<BoundMlp<'t>>)> {
        let (trunk_t, trunk_bound) = if trainable {
            let b = self.trunk.bind(tape, true);
            (self.trunk_values(tape, &b)?, Some(b))
        } else {
            (tape.constant(self.trunk_matrix()), None)
        };
        let neg_mean: Vec<f64> = self.norm.state_mean.iter().map(|m| -m).collect();
        let inv_std: Vec<f64> = self.norm.state_std.iter().map(|s| 1.0 / s).collect();
        Ok((
            BoundOperator {
                state: self.state_branch.bind(tape, trainable),
                control: self.control_branch.bind(tape, trainable),
                trunk_t,
                neg_mean: row(tape, &neg_mean),
                inv_std: row(tape, &inv_std),
                inv_amp: 1.0 / self.norm.amp_scale,
                deriv_mean: row(tape, &self.norm.deriv_mean),
                deriv_std: row(tape, &self.norm.deriv_std),
            },
            trunk_bound,
        ))
    }

    /// Same as [`bind`](Self::bind) but the trunk is always recomputed on the
    /// tape; used to check that the cache is exact.
    pub fn bind_fresh_trunk<'t>(&self, tape: &'t Tape) -> Result<BoundOperator<'t>> {
        let b = self.trunk.bind(tape, false);
        let trunk_t = self.trunk_values(tape, &b)?;
        let (mut bound, _) = self.bind(tape, false)?;
        bound.trunk_t = trunk_t;
        Ok(bound)
    }
}

impl<'t> BoundOperator<'t> {
    /// Predicted `du/dt` for a batch: `u` is `[B x n_x]`, `amps` `[B x n]`,
    /// both in physical units.
    pub fn derivative(&self, u: Var<'t>, amps: Var<'t>) -> Result<Var<'t>> {
        let un = u.add_row(self.neg_mean)?.mul_row(self.inv_std)?;
        let an = amps.scale(self.inv_amp);
        let bu = self.state.forward(un)?;
        let ba = self.control.forward(an)?;
        let out = bu.mul(ba)?.matmul(self.trunk_t)?;
        out.mul_row(self.deriv_std)?.add_row(self.deriv_mean)
    }

    pub fn rk4_step(&self, u: Var<'t>, amps: Var<'t>, dt_op: f64) -> Result<Var<'t>> {
        rk4(u, dt_op, |x| {
            let k = self.derivative(x, amps)?;
            if !k.to_vec().iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { step: 0 });
            }
            Ok(k)
        })
    }
}

/// Classical four-stage Runge-Kutta step for an autonomous right-hand side.
pub fn rk4<'t>(u: Var<'t>, dt: f64, mut rhs: impl FnMut(Var<'t>) -> Result<Var<'t>>) -> Result<Var<'t>> {
    let k1 = rhs(u)?;
    let k2 = rhs(u.add(k1.scale(0.5 * dt))?)?;
    let k3 = rhs(u.add(k2.scale(0.5 * dt))?)?;
    let k4 = rhs(u.add(k3.scale(dt))?)?;
    let incr = k1.add(k2.scale(2.0))?.add(k3.scale(2.0))?.add(k4)?;
    u.add(incr.scale(dt / 6.0))
}

fn stack<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    rows.into_iter().flat_map(|r| r.iter().copied()).collect()
}

/// Single-sample RHS evaluation (no gradients).
pub fn operator_forward(model: &OperatorModel, u: &Field, amps: &ControlAmplitudes) -> Result<Field> {
    check_dims(model, u, amps)?;
    let tape = Tape::new();
    let (op, _) = model.bind(&tape, false)?;
    let uv = tape.constant_from(vec![1, u.len()], u.0.clone())?;
    let av = tape.constant_from(vec![1, amps.len()], amps.0.clone())?;
    Ok(Field(op.derivative(uv, av)?.to_vec()))
}

fn check_dims(model: &OperatorModel, u: &Field, amps: &ControlAmplitudes) -> Result<()> {
    if u.len() != model.n_x() || amps.len() != model.n_actuators() {
        return Err(Error::Shape {
            op: "operator_forward",
            lhs: vec![u.len(), amps.len()],
            rhs: vec![model.n_x(), model.n_actuators()],
        });
    }
    Ok(())
}

/// Single RK4 step of the surrogate (no gradients).
pub fn rk4_step(model: &OperatorModel, u: &Field, amps: &ControlAmplitudes, dt_op: f64) -> Result<Field> {
    check_dims(model, u, amps)?;
    if dt_op <= 0.0 {
        return Err(Error::Config("dt_op must be positive".into()));
    }
    let tape = Tape::new();
    let (op, _) = model.bind(&tape, false)?;
    let uv = tape.constant_from(vec![1, u.len()], u.0.clone())?;
    let av = tape.constant_from(vec![1, amps.len()], amps.0.clone())?;
    Ok(Field(op.rk4_step(uv, av, dt_op)?.to_vec()))
}

/// Autoregressive open-loop rollout at the operator rate.
pub fn operator_rollout(model: &OperatorModel, u0: &Field, amps: &[ControlAmplitudes], dt_op: f64) -> Result<Trajectory> {
    let mut out = operator_rollout_batch(model, std::slice::from_ref(u0), &[amps.to_vec()], dt_op)?;
    Ok(out.remove(0))
}

/// Rolls several samples together; one tape per step keeps memory flat.
pub fn operator_rollout_batch(model: &OperatorModel, u0: &[Field], amps: &[Vec<ControlAmplitudes>], dt_op: f64) -> Result<Vec<Trajectory>> {
    let b = u0.len();
    if amps.len() != b {
        return Err(Error::Config("one amplitude sequence per initial state is required".into()));
    }
    if b == 0 {
        return Ok(Vec::new());
    }
    let steps = amps[0].len();
    if amps.iter().any(|a| a.len() != steps) {
        return Err(Error::Config("amplitude sequences must share a length".into()));
    }
    for (u, a) in u0.iter().zip(amps) {
        if let Some(a0) = a.first() {
            check_dims(model, u, a0)?;
        }
    }
    let n_x = model.n_x();
    let n_a = model.n_actuators();
    let mut trajs: Vec<Trajectory> = u0.iter().map(|u| Trajectory::new(u.clone())).collect();
    let mut state = stack(u0.iter().map(|u| u.0.as_slice()));
    for k in 0..steps {
        let tape = Tape::new();
        let (op, _) = model.bind(&tape, false)?;
        let uv = tape.constant_from(vec![b, n_x], state)?;
        let av = tape.constant_from(vec![b, n_a], stack(amps.iter().map(|a| a[k].0.as_slice())))?;
        let next = op.rk4_step(uv, av, dt_op).map_err(|e| e.at_step(k))?.to_vec();
        for (j, t) in trajs.iter_mut().enumerate() {
            t.push(amps[j][k].clone(), Field(next[j * n_x..(j + 1) * n_x].to_vec()));
        }
        state = next;
    }
    Ok(trajs)
}

/// `||pred - truth||_2 / ||truth||_2` over the whole space-time array.
pub fn relative_l2(pred: &Trajectory, truth: &Trajectory) -> Result<f64> {
    if pred.fields.len() != truth.fields.len()
        || pred.fields.iter().zip(&truth.fields).any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::Shape {
            op: "relative_l2",
            lhs: vec![pred.fields.len()],
            rhs: vec![truth.fields.len()],
        });
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (p, t) in pred.fields.iter().zip(&truth.fields) {
        for (a, b) in p.iter().zip(t.iter()) {
            num += (a - b) * (a - b);
            den += b * b;
        }
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("relative L2 against an all-zero reference"));
    }
    Ok((num / den).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorTrainConfig {
    #[serde(flatten)]
    pub adam: AdamConfig,
    /// Final learning rate of the cosine schedule; constant when absent.
    #[serde(default)]
    pub learning_rate_final: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    /// Number of chained RK4 steps in the integration-matching loss.
    #[serde(default = "one")]
    pub rollout_loss_steps: usize,
    /// Ramp the rollout length from 1 to `rollout_loss_steps` over training.
    #[serde(default)]
    pub curriculum: bool,
}

fn one() -> usize {
    1
}

impl Default for OperatorTrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            learning_rate_final: None,
            batch_size: 64,
            epochs: 100,
            rollout_loss_steps: 1,
            curriculum: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitStatus {
    Completed,
    /// Loss went non-finite; the model is the last stable one.
    Diverged { epoch: usize },
}

/// A trained surrogate with its per-epoch mean training loss.
#[derive(Clone, Debug)]
pub struct OperatorFit {
    pub model: OperatorModel,
    pub curve: Vec<f64>,
    pub status: FitStatus,
}

struct Windows {
    n_x: usize,
    n_a: usize,
    /// Operator-rate states per trajectory, flattened.
    states: Vec<Vec<f64>>,
    amps: Vec<Vec<f64>>,
    n_op: usize,
}

impl Windows {
    fn new(data: &Dataset, indices: &[usize]) -> Result<Self> {
        let mut states = Vec::new();
        let mut amps = Vec::new();
        let mut n_op = 0;
        for &i in indices {
            let t = data.op_trajectory(i);
            n_op = t.n_steps();
            states.push(stack(t.fields.iter().map(|f| f.0.as_slice())));
            amps.push(stack(t.amplitudes.iter().map(|a| a.0.as_slice())));
        }
        Ok(Self {
            n_x: data.n_x(),
            n_a: data.n_actuators(),
            states,
            amps,
            n_op,
        })
    }

    fn starts(&self, steps: usize) -> Vec<(usize, usize)> {
        let per = (self.n_op + 1).saturating_sub(steps);
        (0..self.states.len())
            .flat_map(|t| (0..per).map(move |k| (t, k)))
            .collect()
    }
}

/// Mean-square one- or multi-step integration loss for a minibatch.
fn batch_loss<'t>(
    tape: &'t Tape,
    op: &BoundOperator<'t>,
    win: &Windows,
    batch: &[(usize, usize)],
    steps: usize,
    dt_op: f64,
    weight: Var<'t>,
) -> Result<Var<'t>> {
    let b = batch.len();
    let (n_x, n_a) = (win.n_x, win.n_a);
    let state_at = |k_off: usize| {
        stack(
            batch
                .iter()
                .map(|&(t, k)| &win.states[t][(k + k_off) * n_x..(k + k_off + 1) * n_x]),
        )
    };
    let mut u = tape.constant_from(vec![b, n_x], state_at(0))?;
    let mut total: Option<Var<'t>> = None;
    for s in 0..steps {
        let a = stack(batch.iter().map(|&(t, k)| &win.amps[t][(k + s) * n_a..(k + s + 1) * n_a]));
        let av = tape.constant_from(vec![b, n_a], a)?;
        u = op.rk4_step(u, av, dt_op)?;
        let target = tape.constant_from(vec![b, n_x], state_at(s + 1))?;
        let err = u.sub(target)?.mul_row(weight)?.square().sum();
        total = Some(match total {
            Some(t) => t.add(err)?,
            None => err,
        });
    }
    Ok(total
        .expect("at least one step")
        .scale(1.0 / (b * n_x * steps) as f64))
}

/// Integration-matching training of the surrogate on the dataset's training
/// split.
pub fn train_operator(data: &Dataset, arch: &OperatorArch, cfg: &OperatorTrainConfig, rng_seed: u64) -> Result<OperatorFit> {
    let train_idx = data.train_indices();
    if train_idx.is_empty() {
        return Err(Error::Config("dataset has no training samples".into()));
    }
    if cfg.batch_size == 0 || cfg.rollout_loss_steps == 0 {
        return Err(Error::Config("batch size and rollout steps must be positive".into()));
    }
    let dt_op = data.dt_op();
    let op_trajs: Vec<Trajectory> = train_idx.iter().map(|&i| data.op_trajectory(i)).collect();
    let norm = Normalization::from_trajectories(op_trajs.iter(), dt_op, data.a_max())?;
    drop(op_trajs);
    let mut model = OperatorModel::new(arch.clone(), data.grid_x(), data.n_actuators(), norm, rng_seed);
    let win = Windows::new(data, &train_idx)?;
    if cfg.rollout_loss_steps > win.n_op {
        return Err(Error::Config(format!(
            "rollout_loss_steps {} exceeds the {} operator steps per trajectory",
            cfg.rollout_loss_steps, win.n_op
        )));
    }
    let weight: Vec<f64> = floored(&model.norm.deriv_std).iter().map(|s| 1.0 / (dt_op * s)).collect();

    let mut adam = Adam::new(cfg.adam.clone());
    let mut rng = stream_rng(rng_seed, 1);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut status = FitStatus::Completed;
    let mut last_stable = model.clone();
    for epoch in 0..cfg.epochs {
        let steps = if cfg.curriculum {
            (1 + epoch * cfg.rollout_loss_steps / cfg.epochs.max(1)).min(cfg.rollout_loss_steps)
        } else {
            cfg.rollout_loss_steps
        };
        let lr = match cfg.learning_rate_final {
            Some(end) => cosine_lr(cfg.adam.learning_rate, end, epoch, cfg.epochs),
            None => cfg.adam.learning_rate,
        };
        let mut starts = win.starts(steps);
        starts.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        let mut diverged = false;
        for batch in starts.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let (op, trunk) = model.bind(&tape, true)?;
            let w = row(&tape, &weight);
            let loss = match batch_loss(&tape, &op, &win, batch, steps, dt_op, w) {
                Ok(l) => l,
                Err(Error::NonFinite { .. }) | Err(Error::Step { .. }) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            let value = loss.item();
            if !value.is_finite() {
                diverged = true;
                break;
            }
            sum += value * batch.len() as f64;
            count += batch.len();
            let grads = tape.backward(loss)?;
            model.accumulate(&grads, &op, trunk.as_ref());
            drop(op);
            drop(trunk);
            adam.step(model.params_mut(), lr);
        }
        model.invalidate_cache();
        if diverged {
            status = FitStatus::Diverged { epoch };
            model = last_stable;
            break;
        }
        curve.push(sum / count.max(1) as f64);
        last_stable = model.clone();
    }
    Ok(OperatorFit { model, curve, status })
}

/// Mean per-trajectory relative L2 error of full-horizon surrogate rollouts
/// against the reference solver on the given samples.
pub fn evaluate_operator(model: &OperatorModel, data: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::UndefinedMetric("no samples to evaluate"));
    }
    let truths: Vec<Trajectory> = indices.iter().map(|&i| data.op_trajectory(i)).collect();
    let mut total = 0.0;
    for chunk in truths.chunks(64) {
        let u0: Vec<Field> = chunk.iter().map(|t| t.fields[0].clone()).collect();
        let amps: Vec<Vec<ControlAmplitudes>> = chunk.iter().map(|t| t.amplitudes.clone()).collect();
        let preds = operator_rollout_batch(model, &u0, &amps, data.dt_op())?;
        for (p, t) in preds.iter().zip(chunk) {
            total += relative_l2(p, t)?;
        }
    }
    Ok(total / truths.len() as f64)
}
