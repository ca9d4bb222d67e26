//! Explicit feedback policy and its offline training through the frozen
//! surrogate.
//!
//! The policy maps `[u; xi]` through a SiLU network and projects with
//! `a_max * tanh(.)`, so the amplitude bound holds by construction. Training
//! rolls the policy in closed loop through the operator on a tape and
//! descends the penalized objective with respect to the policy weights only.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{ControlAmplitudes, Field, Trajectory};
use crate::grf::GrfSampler;
use crate::nn::{cosine_lr, Activation, Adam, AdamConfig, BoundMlp, Mlp};
use crate::operator::OperatorModel;
use crate::rng::stream_rng;
use crate::solvers::{second_difference, BoundaryCondition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub width: usize,
    pub depth: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Silu
}

impl Default for PolicyArch {
    fn default() -> Self {
        Self {
            width: 256,
            depth: 3,
            activation: Activation::Silu,
        }
    }
}

/// Per-scenario parameters `xi` fed to the policy alongside the state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    #[serde(default)]
    pub target: Option<Field>,
}

impl ScenarioParams {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn tracking(target: Field) -> Self {
        Self { target: Some(target) }
    }

    /// Flattened `xi`.
    pub fn features(&self) -> &[f64] {
        self.target.as_ref().map_or(&[], |t| t.0.as_slice())
    }
}

/// A scenario: initial state plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub u0: Field,
    pub params: ScenarioParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    pub arch: PolicyArch,
    pub net: Mlp,
    pub a_max: f64,
    pub n_x: usize,
    /// Length of `xi`.
    pub n_xi: usize,
}

pub struct BoundPolicy<'t> {
    net: BoundMlp<'t>,
    a_max: f64,
}

impl PolicyModel {
    /// Adds the gradients of a trainable binding into the weights.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &BoundPolicy<'_>) {
        self.net.accumulate(grads, &bound.net);
    }

    pub fn new(arch: PolicyArch, n_x: usize, n_xi: usize, n_actuators: usize, a_max: f64, rng_seed: u64) -> Self {
        let mut rng = stream_rng(rng_seed, 0);
        let mut sizes = vec![n_x + n_xi];
        sizes.extend(std::iter::repeat_n(arch.width, arch.depth));
        sizes.push(n_actuators);
        let net = Mlp::new(&sizes, arch.activation, &mut rng);
        Self {
            arch,
            net,
            a_max,
            n_x,
            n_xi,
        }
    }

    /// Zeroes the output layer so the initial policy applies no control.
    pub fn zero_output(mut self) -> Self {
        let last = self.net.layers.last_mut().expect("non-empty");
        last.weight.data_mut().fill(0.0);
        last.bias.data_mut().fill(0.0);
        self
    }

    pub fn n_actuators(&self) -> usize {
        self.net.output_dim()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundPolicy<'t> {
        BoundPolicy {
            net: self.net.bind(tape, trainable),
            a_max: self.a_max,
        }
    }

    fn check(&self, u: &[f64], xi: &[f64]) -> Result<()> {
        if u.len() != self.n_x || xi.len() != self.n_xi {
            return Err(Error::Shape {
                op: "policy_forward",
                lhs: vec![u.len(), xi.len()],
                rhs: vec![self.n_x, self.n_xi],
            });
        }
        Ok(())
    }
}

impl<'t> BoundPolicy<'t> {
    /// `u` is `[B x n_x]`, `xi` is `[B x n_xi]` or absent.
    pub fn forward(&self, u: Var<'t>, xi: Option<Var<'t>>) -> Result<Var<'t>> {
        let z = match xi {
            Some(xi) => u.concat_cols(xi)?,
            None => u,
        };
        Ok(self.net.forward(z)?.tanh().scale(self.a_max))
    }
}

pub fn policy_forward(policy: &PolicyModel, u: &Field, scen: &ScenarioParams) -> Result<ControlAmplitudes> {
    let xi = scen.features();
    policy.check(u, xi)?;
    let tape = Tape::new();
    let p = policy.bind(&tape, false);
    let uv = tape.constant_from(vec![1, u.len()], u.0.clone())?;
    let xv = (!xi.is_empty())
        .then(|| tape.constant_from(vec![1, xi.len()], xi.to_vec()))
        .transpose()?;
    Ok(ControlAmplitudes(p.forward(uv, xv)?.to_vec()))
}

/// States `[B x n_x]` and amplitudes `[B x n]` of a batched closed-loop
/// rollout, still on the tape.
pub struct TapeRollout<'t> {
    pub states: Vec<Var<'t>>,
    pub amps: Vec<Var<'t>>,
}

/// Closed-loop rollout of `steps` operator steps for a batch of scenarios.
pub fn dpc_rollout_on_tape<'t>(
    tape: &'t Tape,
    policy: &BoundPolicy<'t>,
    operator: &crate::operator::BoundOperator<'t>,
    scenarios: &[Scenario],
    steps: usize,
    dt_op: f64,
) -> Result<TapeRollout<'t>> {
    let b = scenarios.len();
    let n_x = scenarios[0].u0.len();
    let u0: Vec<f64> = scenarios.iter().flat_map(|s| s.u0.iter().copied()).collect();
    let n_xi = scenarios[0].params.features().len();
    let xi = if n_xi > 0 {
        let data = scenarios.iter().flat_map(|s| s.params.features().iter().copied()).collect();
        Some(tape.constant_from(vec![b, n_xi], data)?)
    } else {
        None
    };
    let mut u = tape.constant_from(vec![b, n_x], u0)?;
    let mut states = vec![u];
    let mut amps = Vec::with_capacity(steps);
    for k in 0..steps {
        let a = policy.forward(u, xi)?;
        u = operator.rk4_step(u, a, dt_op).map_err(|e| e.at_step(k))?;
        amps.push(a);
        states.push(u);
    }
    Ok(TapeRollout { states, amps })
}

/// Single-scenario closed-loop rollout through the surrogate, off the tape.
pub fn dpc_rollout(policy: &PolicyModel, operator: &OperatorModel, u0: &Field, scen: &ScenarioParams, steps: usize, dt_op: f64) -> Result<Trajectory> {
    policy.check(u0, scen.features())?;
    let tape = Tape::new();
    let p = policy.bind(&tape, false);
    let (op, _) = operator.bind(&tape, false)?;
    let scenario = [Scenario {
        u0: u0.clone(),
        params: scen.clone(),
    }];
    let r = dpc_rollout_on_tape(&tape, &p, &op, &scenario, steps, dt_op)?;
    let mut traj = Trajectory::new(u0.clone());
    for (a, u) in r.amps.iter().zip(&r.states[1..]) {
        traj.push(ControlAmplitudes(a.to_vec()), Field(u.to_vec()));
    }
    Ok(traj)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// `||u(T) - u_target||^2`.
    TerminalTracking,
    /// `int_0^T ||u_xx||^2 dt`.
    CurvatureIntegral,
}

/// Pointwise constraint `coefficient * v - offset <= 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineConstraint {
    pub coefficient: f64,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpcLossConfig {
    pub kind: CostKind,
    /// Stage-cost weight.
    #[serde(default)]
    pub q_stage: f64,
    #[serde(default = "hundred")]
    pub q_h: f64,
    #[serde(default = "hundred")]
    pub q_g: f64,
    /// Terminal-cost weight.
    #[serde(default)]
    pub q_terminal: f64,
    #[serde(default)]
    pub state_constraints: Vec<AffineConstraint>,
    #[serde(default)]
    pub control_constraints: Vec<AffineConstraint>,
}

fn hundred() -> f64 {
    100.0
}

impl DpcLossConfig {
    pub fn tracking() -> Self {
        Self {
            kind: CostKind::TerminalTracking,
            q_stage: 0.0,
            q_h: 100.0,
            q_g: 100.0,
            q_terminal: 1.0,
            state_constraints: Vec::new(),
            control_constraints: Vec::new(),
        }
    }

    pub fn curvature() -> Self {
        Self {
            kind: CostKind::CurvatureIntegral,
            q_stage: 1.0,
            q_terminal: 0.0,
            ..Self::tracking()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.q_stage, self.q_h, self.q_g, self.q_terminal];
        if w.iter().any(|q| !(*q >= 0.0)) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.q_stage == 0.0 && self.q_terminal == 0.0 {
            return Err(Error::Config("at least one of the stage and terminal costs must be active".into()));
        }
        Ok(())
    }
}

/// Quadrature data of the loss.
#[derive(Clone, Debug)]
pub struct LossGeometry {
    pub dx: f64,
    pub dt_op: f64,
    pub bc: BoundaryCondition,
}

/// Matrix `M` with `(u M)_i = (D2 u)_i`, so batches of row states can be
/// differentiated with a single product.
fn second_difference_matrix(n: usize, dx: f64, bc: BoundaryCondition) -> Tensor {
    let mut m = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = second_difference(&e, dx, bc);
        e[j] = 0.0;
        // column j of D2 becomes row j of M
        m[j * n..(j + 1) * n].copy_from_slice(&col);
    }
    Tensor::matrix(n, n, m).expect("square")
}

/// `sum_i (D2 u)_i^2 dx` for a single field.
pub fn curvature_slice(u: &[f64], dx: f64, bc: BoundaryCondition) -> f64 {
    second_difference(u, dx, bc).iter().map(|d| d * d).sum::<f64>() * dx
}

fn penalty<'t>(v: Var<'t>, constraints: &[AffineConstraint]) -> Result<Option<Var<'t>>> {
    let mut total: Option<Var<'t>> = None;
    for c in constraints {
        let h = v.scale(c.coefficient).sub(v.tape().scalar(c.offset))?.relu().square().sum();
        total = Some(match total {
            Some(t) => t.add(h)?,
            None => h,
        });
    }
    Ok(total)
}

/// Penalized closed-loop objective, normalized by `m * N * n_x`.
pub fn dpc_loss<'t>(rollout: &TapeRollout<'t>, scenarios: &[Scenario], cfg: &DpcLossConfig, geom: &LossGeometry) -> Result<Var<'t>> {
    let tape = rollout.states[0].tape();
    let shape = rollout.states[0].shape();
    let (m, n_x) = (shape[0], shape[1]);
    let steps = rollout.amps.len();
    let target = match cfg.kind {
        CostKind::TerminalTracking => {
            let data: Option<Vec<f64>> = scenarios
                .iter()
                .map(|s| s.params.target.as_ref().map(|t| t.0.clone()))
                .collect::<Option<Vec<_>>>()
                .map(|v| v.concat());
            let data = data.ok_or_else(|| Error::Config("terminal tracking needs a target per scenario".into()))?;
            Some(tape.constant_from(vec![m, n_x], data)?)
        }
        CostKind::CurvatureIntegral => None,
    };
    let d2 = (cfg.kind == CostKind::CurvatureIntegral).then(|| tape.constant(&second_difference_matrix(n_x, geom.dx, geom.bc)));
    let cost = |u: Var<'t>| -> Result<Var<'t>> {
        match (target, d2) {
            (Some(t), _) => Ok(u.sub(t)?.square().sum().scale(geom.dx)),
            (None, Some(d)) => Ok(u.matmul(d)?.square().sum().scale(geom.dx)),
            _ => unreachable!("cost kind fixes exactly one of target and D2"),
        }
    };

    let mut total = tape.scalar(0.0);
    for k in 0..steps {
        let u = rollout.states[k];
        if cfg.q_stage > 0.0 {
            let stage = cost(u)?;
            let stage = if cfg.kind == CostKind::CurvatureIntegral { stage.scale(geom.dt_op) } else { stage };
            total = total.add(stage.scale(cfg.q_stage))?;
        }
        if let Some(p) = penalty(u, &cfg.state_constraints)? {
            total = total.add(p.scale(cfg.q_h))?;
        }
        if let Some(p) = penalty(rollout.amps[k], &cfg.control_constraints)? {
            total = total.add(p.scale(cfg.q_g))?;
        }
    }
    if cfg.q_terminal > 0.0 {
        total = total.add(cost(rollout.states[steps])?.scale(cfg.q_terminal))?;
    }
    Ok(total.scale(1.0 / (m * steps.max(1) * n_x) as f64))
}

/// Where tracking targets come from.
#[derive(Clone, Debug)]
pub enum TargetSource {
    None,
    Grf(GrfSampler),
    /// Uniform draws from a fixed pool, e.g. terminal states of training
    /// trajectories.
    Pool(Vec<Field>),
}

/// Draws `(u0, xi)` pairs from the experiment distributions.
#[derive(Clone, Debug)]
pub struct ScenarioSampler {
    pub initial: GrfSampler,
    pub target: TargetSource,
}

impl ScenarioSampler {
    pub fn sample(&self, rng: &mut impl rand::Rng) -> Scenario {
        let u0 = self.initial.sample_with(rng);
        let target = match &self.target {
            TargetSource::None => None,
            TargetSource::Grf(s) => Some(s.sample_with(rng)),
            TargetSource::Pool(pool) => Some(pool[rng.random_range(0..pool.len())].clone()),
        };
        Scenario {
            u0,
            params: ScenarioParams { target },
        }
    }

    /// Scenario `index` of the stream identified by `seed`.
    pub fn scenario(&self, seed: u64, index: u64) -> Scenario {
        self.sample(&mut stream_rng(seed, index))
    }

    pub fn n_xi(&self, n_x: usize) -> usize {
        match self.target {
            TargetSource::None => 0,
            _ => n_x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainConfig {
    #[serde(flatten)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub learning_rate_final: Option<f64>,
    /// Number of gradient steps; each draws a fresh minibatch.
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Rescale the gradient when its global norm exceeds this value.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

fn default_batch() -> usize {
    32
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            learning_rate_final: None,
            epochs: 1000,
            batch_size: 32,
            max_grad_norm: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PolicyFit {
    pub model: PolicyModel,
    pub curve: Vec<f64>,
    pub status: crate::operator::FitStatus,
}

/// Offline training of the policy against the frozen operator.
#[allow(clippy::too_many_arguments)]
pub fn train_policy(
    operator: &OperatorModel,
    init: PolicyModel,
    sampler: &ScenarioSampler,
    loss_cfg: &DpcLossConfig,
    geom: &LossGeometry,
    steps: usize,
    cfg: &PolicyTrainConfig,
    rng_seed: u64,
) -> Result<PolicyFit> {
    loss_cfg.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("policy batch size must be positive".into()));
    }
    let mut model = init;
    let mut adam = Adam::new(cfg.adam.clone());
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut last_stable = model.clone();
    let mut status = crate::operator::FitStatus::Completed;
    for epoch in 0..cfg.epochs {
        let mut rng = stream_rng(rng_seed, epoch as u64);
        let scenarios: Vec<Scenario> = (0..cfg.batch_size).map(|_| sampler.sample(&mut rng)).collect();
        let tape = Tape::new();
        let p = model.bind(&tape, true);
        let (op, _) = operator.bind(&tape, false)?;
        let loss = dpc_rollout_on_tape(&tape, &p, &op, &scenarios, steps, geom.dt_op)
            .and_then(|r| dpc_loss(&r, &scenarios, loss_cfg, geom));
        let loss = match loss {
            Ok(l) if l.item().is_finite() => l,
            Ok(_) | Err(Error::Step { .. }) | Err(Error::NonFinite { .. }) => {
                status = crate::operator::FitStatus::Diverged { epoch };
                model = last_stable;
                break;
            }
            Err(e) => return Err(e),
        };
        curve.push(loss.item());
        let grads = tape.backward(loss)?;
        last_stable = model.clone();
        model.accumulate(&grads, &p);
        drop(p);
        if let Some(max) = cfg.max_grad_norm {
            let norm = model
                .net
                .params()
                .filter_map(|t| t.grad.as_ref())
                .flat_map(|g| g.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > max {
                let s = max / norm;
                for t in model.net.params_mut() {
                    if let Some(g) = t.grad.as_mut() {
                        g.iter_mut().for_each(|v| *v *= s);
                    }
                }
            }
        }
        let lr = match cfg.learning_rate_final {
            Some(end) => cosine_lr(cfg.adam.learning_rate, end, epoch, cfg.epochs),
            None => cfg.adam.learning_rate,
        };
        adam.step(model.net.params_mut(), lr);
    }
    Ok(PolicyFit { model, curve, status })
}

/// Loss of `policy` on a fixed batch of `batch` scenarios drawn from stream
/// `seed`; used to report a reproducible figure after training.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    operator: &OperatorModel,
    policy: &PolicyModel,
    sampler: &ScenarioSampler,
    loss_cfg: &DpcLossConfig,
    geom: &LossGeometry,
    steps: usize,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = stream_rng(seed, u64::MAX);
    let scenarios: Vec<Scenario> = (0..batch.max(1)).map(|_| sampler.sample(&mut rng)).collect();
    let tape = Tape::new();
    let p = policy.bind(&tape, false);
    let (op, _) = operator.bind(&tape, false)?;
    let r = dpc_rollout_on_tape(&tape, &p, &op, &scenarios, steps, geom.dt_op)?;
    Ok(dpc_loss(&r, &scenarios, loss_cfg, geom)?.item())
}
