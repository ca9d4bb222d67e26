//! End-to-end stages shared by the command-line tool and the test suites.

use crate::config::ExperimentConfig;
use crate::dataset::{generate_dataset, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{build_comparison, ComparisonSetup, EvalReport};
use crate::operator::{evaluate_operator, train_operator, OperatorFit, OperatorModel};
use crate::policy::{batch_loss, train_policy, PolicyFit, PolicyModel};
use crate::rng::derive_seed;

/// Generates the training corpus and stamps it with the config hash.
pub fn generate(cfg: &ExperimentConfig, threads: usize) -> Result<Dataset> {
    let mut data = generate_dataset(&cfg.problem, &cfg.grf_train, &cfg.dataset, cfg.seeds.data, threads)?;
    data.manifest.config_hash = Some(cfg.config_hash());
    Ok(data)
}

/// Refuses artifacts produced under a different problem definition.
pub fn check_hash(cfg: &ExperimentConfig, found: Option<&str>, what: &str) -> Result<()> {
    let expected = cfg.config_hash();
    match found {
        Some(h) if h == expected => Ok(()),
        Some(h) => Err(Error::Mismatch(format!("{what} was built for config {h}, this config is {expected}"))),
        None => Err(Error::Mismatch(format!("{what} carries no config hash"))),
    }
}

pub struct OperatorStage {
    pub fit: OperatorFit,
    /// Mean full-horizon relative L2 error on the held-out split, when it
    /// is non-empty.
    pub test_rel_l2: Option<f64>,
}

pub fn train_operator_stage(cfg: &ExperimentConfig, data: &Dataset) -> Result<OperatorStage> {
    let fit = train_operator(data, &cfg.operator.arch, &cfg.operator.train, cfg.seeds.operator)?;
    let test = data.test_indices();
    let test_rel_l2 = if test.is_empty() {
        None
    } else {
        Some(evaluate_operator(&fit.model, data, &test)?)
    };
    Ok(OperatorStage { fit, test_rel_l2 })
}

pub fn initial_policy(cfg: &ExperimentConfig, data: Option<&Dataset>) -> Result<PolicyModel> {
    let problem = cfg.build_problem()?;
    let sampler = cfg.scenario_sampler(&problem, data)?;
    let p = PolicyModel::new(
        cfg.policy.arch.clone(),
        problem.n_x(),
        sampler.n_xi(problem.n_x()),
        problem.n_actuators(),
        problem.a_max(),
        cfg.seeds.policy,
    );
    Ok(if cfg.policy.zero_init { p.zero_output() } else { p })
}

pub fn train_policy_stage(cfg: &ExperimentConfig, operator: &OperatorModel, data: Option<&Dataset>) -> Result<PolicyFit> {
    let problem = cfg.build_problem()?;
    let sampler = cfg.scenario_sampler(&problem, data)?;
    let geom = cfg.loss_geometry(&problem);
    train_policy(
        operator,
        initial_policy(cfg, data)?,
        &sampler,
        &cfg.policy.loss,
        &geom,
        problem.n_op(),
        &cfg.policy.train,
        cfg.seeds.policy,
    )
}

/// DPC loss of `policy` on a fixed validation batch.
pub fn policy_validation_loss(cfg: &ExperimentConfig, operator: &OperatorModel, policy: &PolicyModel, data: Option<&Dataset>) -> Result<f64> {
    let problem = cfg.build_problem()?;
    let sampler = cfg.scenario_sampler(&problem, data)?;
    batch_loss(
        operator,
        policy,
        &sampler,
        &cfg.policy.loss,
        &cfg.loss_geometry(&problem),
        problem.n_op(),
        cfg.policy.train.batch_size,
        derive_seed(cfg.seeds.policy, "validation"),
    )
}

pub fn evaluate_stage(
    cfg: &ExperimentConfig,
    operator: &OperatorModel,
    policy: &PolicyModel,
    data: Option<&Dataset>,
    n_eval: usize,
    threads: usize,
) -> Result<EvalReport> {
    let problem = cfg.build_problem()?;
    let sampler = cfg.scenario_sampler(&problem, data)?;
    let setup = ComparisonSetup {
        name: &cfg.name,
        problem: &problem,
        operator,
        policy,
        sampler: &sampler,
        kind: cfg.policy.loss.kind,
        geom: cfg.loss_geometry(&problem),
    };
    build_comparison(&setup, n_eval, cfg.seeds.eval, threads)
}
