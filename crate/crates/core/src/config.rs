//! Experiment configuration files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, DatasetConfig};
use crate::error::{Error, Result};
use crate::grf::{GrfConfig, GrfSampler};
use crate::nn::AdamConfig;
use crate::operator::{OperatorArch, OperatorTrainConfig};
use crate::policy::{
    CostKind, DpcLossConfig, LossGeometry, PolicyArch, PolicyTrainConfig, ScenarioSampler, TargetSource,
};
use crate::problem::{Problem, ProblemConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// No target; the policy sees the state only.
    None,
    /// Targets drawn from `grf_target`.
    Grf,
    /// Terminal states of randomly chosen training trajectories.
    TrainingTerminal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSection {
    #[serde(default)]
    pub arch: OperatorArch,
    #[serde(default)]
    pub train: OperatorTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySection {
    #[serde(default)]
    pub arch: PolicyArch,
    #[serde(default)]
    pub train: PolicyTrainConfig,
    pub loss: DpcLossConfig,
    /// Start from a policy whose output layer is zero.
    #[serde(default = "yes")]
    pub zero_init: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    /// Required `Controlled(FDM) / Natural(FDM)` mean ratio.
    pub max_ratio: f64,
    /// Allowed `|Controlled(TI-DON) - Controlled(FDM)| / Controlled(FDM)`.
    #[serde(default = "default_gap")]
    pub max_transfer_gap: f64,
}

fn default_n_eval() -> usize {
    50
}

fn default_gap() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub operator: u64,
    pub policy: u64,
    pub eval: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub problem: ProblemConfig,
    pub grf_train: GrfConfig,
    pub grf_policy_ic: GrfConfig,
    #[serde(default)]
    pub grf_target: Option<GrfConfig>,
    pub target: TargetKind,
    pub dataset: DatasetConfig,
    #[serde(default = "default_operator")]
    pub operator: OperatorSection,
    pub policy: PolicySection,
    pub evaluation: EvaluationConfig,
    pub seeds: Seeds,
    #[serde(default)]
    pub output_dir: Option<String>,
}

fn default_operator() -> OperatorSection {
    OperatorSection {
        arch: OperatorArch::default(),
        train: OperatorTrainConfig::default(),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| Error::Config(format!("{name}: {e}"));
        Problem::new(self.problem.clone()).map_err(|e| field("problem", e))?;
        self.grf_train.validate().map_err(|e| field("grf_train", e))?;
        self.grf_policy_ic.validate().map_err(|e| field("grf_policy_ic", e))?;
        match (self.target, &self.grf_target) {
            (TargetKind::Grf, None) => return Err(Error::Config("grf_target: required when target is \"grf\"".into())),
            (TargetKind::Grf, Some(g)) => g.validate().map_err(|e| field("grf_target", e))?,
            _ => {}
        }
        let tracking = self.policy.loss.kind == CostKind::TerminalTracking;
        if tracking == (self.target == TargetKind::None) {
            return Err(Error::Config(
                "target: terminal tracking needs a target source and the curvature objective none".into(),
            ));
        }
        self.policy.loss.validate().map_err(|e| field("policy.loss", e))?;
        let positive = [
            ("operator.arch.width", self.operator.arch.width),
            ("operator.arch.p", self.operator.arch.p),
            ("operator.train.batch_size", self.operator.train.batch_size),
            ("operator.train.rollout_loss_steps", self.operator.train.rollout_loss_steps),
            ("policy.arch.width", self.policy.arch.width),
            ("policy.train.batch_size", self.policy.train.batch_size),
            ("evaluation.n_eval", self.evaluation.n_eval),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name}: must be positive")));
            }
        }
        for (name, a) in [("operator.train", &self.operator.train.adam), ("policy.train", &self.policy.train.adam)] {
            check_adam(a).map_err(|e| field(name, e))?;
        }
        if !(self.evaluation.max_ratio >= 0.0 && self.evaluation.max_transfer_gap >= 0.0) {
            return Err(Error::Config("evaluation: thresholds must be nonnegative".into()));
        }
        Ok(())
    }

    /// SHA-256 over the problem definition: physics, grid, actuators and
    /// every sampling distribution. Dataset size and training settings are
    /// excluded so they can be changed without invalidating artifacts.
    pub fn config_hash(&self) -> String {
        let key = serde_json::json!({
            "problem": self.problem,
            "grf_train": self.grf_train,
            "grf_policy_ic": self.grf_policy_ic,
            "grf_target": self.grf_target,
            "target": self.target,
        });
        let digest = Sha256::digest(key.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn build_problem(&self) -> Result<Problem> {
        Problem::new(self.problem.clone())
    }

    pub fn loss_geometry(&self, problem: &Problem) -> LossGeometry {
        LossGeometry {
            dx: problem.grid.dx,
            dt_op: problem.dt_op(),
            bc: self.problem.pde.bc,
        }
    }

    /// Scenario distribution of policy training and evaluation. Corpus
    /// targets need the training dataset.
    pub fn scenario_sampler(&self, problem: &Problem, data: Option<&Dataset>) -> Result<ScenarioSampler> {
        let initial = GrfSampler::new(&self.grf_policy_ic, &problem.grid)?;
        let target = match self.target {
            TargetKind::None => TargetSource::None,
            TargetKind::Grf => {
                let g = self.grf_target.as_ref().expect("validated");
                TargetSource::Grf(GrfSampler::new(g, &problem.grid)?)
            }
            TargetKind::TrainingTerminal => {
                let data = data.ok_or_else(|| Error::Config("corpus targets need the training dataset".into()))?;
                let pool: Vec<_> = data
                    .train_indices()
                    .into_iter()
                    .map(|i| data.trajectory(i).terminal().clone())
                    .collect();
                if pool.is_empty() {
                    return Err(Error::Config("corpus targets need at least one training trajectory".into()));
                }
                TargetSource::Pool(pool)
            }
        };
        Ok(ScenarioSampler { initial, target })
    }
}

fn check_adam(a: &AdamConfig) -> Result<()> {
    if !(a.learning_rate > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
        return Err(Error::Config("learning rate, betas or epsilon out of range".into()));
    }
    Ok(())
}
