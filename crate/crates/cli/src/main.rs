use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pde_dpc::checkpoint::{load_operator, load_policy, save_operator, save_policy, Checkpoint};
use pde_dpc::config::ExperimentConfig;
use pde_dpc::dataset::Dataset;
use pde_dpc::evaluation::write_report;
use pde_dpc::operator::{FitStatus, OperatorModel};
use pde_dpc::policy::PolicyModel;
use pde_dpc::{pipeline, Error, TOOL_VERSION};

#[derive(Parser)]
#[command(name = "pde-dpc", version, about = "Learned-operator predictive control for 1-D PDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training corpus with the reference solver.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train the operator surrogate on a generated corpus.
    TrainOperator {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the control policy through the frozen surrogate.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        operator: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compare natural and controlled runs on both plants.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        operator: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        n_eval: Option<usize>,
    },
    /// Print the metadata of a dataset directory or checkpoint file.
    Inspect { path: PathBuf },
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    config: PathBuf,
    /// Overrides the seed of this stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory; defaults to `<run>/data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output root; overrides `PDE_DPC_OUT` and the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads. Results are bitwise reproducible with 1.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Combine artifacts even when their config hashes differ.
    #[arg(long)]
    force: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

const USAGE: u8 = 2;
const ARTIFACT: u8 = 3;
const GATE: u8 = 4;

/// Runtime failures that are neither usage nor artifact problems.
fn runtime(e: Error) -> Failure {
    let code = match e {
        Error::Mismatch(_) | Error::Format { .. } => ARTIFACT,
        Error::Config(_) => USAGE,
        _ => 1,
    };
    Failure::new(code, e.to_string())
}

fn artifact(what: &str, path: &Path) -> impl FnOnce(Error) -> Failure {
    let context = format!("cannot load {what} {}", path.display());
    move |e| Failure::new(ARTIFACT, format!("{context}: {e}"))
}

struct Run {
    cfg: ExperimentConfig,
    hash: String,
    dir: PathBuf,
    common: Common,
}

impl Run {
    fn open(common: Common) -> Result<Self, Failure> {
        let cfg = ExperimentConfig::load(&common.config)
            .map_err(|e| Failure::new(USAGE, format!("{}: {e}", common.config.display())))?;
        let root = common
            .out
            .clone()
            .or_else(|| std::env::var_os("PDE_DPC_OUT").map(PathBuf::from))
            .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        Ok(Self {
            hash: cfg.config_hash(),
            dir: root.join(&cfg.name),
            cfg,
            common,
        })
    }

    fn provenance(&self) -> String {
        format!("tool_version={TOOL_VERSION} config_hash={}", self.hash)
    }

    fn data_dir(&self) -> PathBuf {
        self.common.data.clone().unwrap_or_else(|| self.dir.join("data"))
    }

    fn check(&self, found: Option<&str>, what: &str) -> Result<(), Failure> {
        match pipeline::check_hash(&self.cfg, found, what) {
            Err(e) if self.common.force => {
                eprintln!("warning: {e}");
                Ok(())
            }
            r => r.map_err(runtime),
        }
    }

    fn load_data(&self) -> Result<Dataset, Failure> {
        let dir = self.data_dir();
        let data = Dataset::load(&dir).map_err(artifact("dataset", &dir))?;
        self.check(data.manifest.config_hash.as_deref(), "dataset")?;
        Ok(data)
    }

    /// The corpus is only needed when targets are drawn from it.
    fn load_data_if_needed(&self) -> Result<Option<Dataset>, Failure> {
        if self.cfg.target == pde_dpc::config::TargetKind::TrainingTerminal {
            self.load_data().map(Some)
        } else {
            Ok(None)
        }
    }

    fn load_operator(&self, path: Option<PathBuf>) -> Result<OperatorModel, Failure> {
        let path = path.unwrap_or_else(|| self.dir.join("operator.ckpt"));
        let (model, header) = load_operator(&path).map_err(artifact("operator checkpoint", &path))?;
        self.check(header.config_hash.as_deref(), "operator checkpoint")?;
        Ok(model)
    }

    fn load_policy(&self, path: Option<PathBuf>) -> Result<PolicyModel, Failure> {
        let path = path.unwrap_or_else(|| self.dir.join("policy.ckpt"));
        let (model, header) = load_policy(&path).map_err(artifact("policy checkpoint", &path))?;
        self.check(header.config_hash.as_deref(), "policy checkpoint")?;
        Ok(model)
    }

    fn write_curve(&self, name: &str, curve: &[f64]) -> Result<PathBuf, Failure> {
        let mut csv = format!("# {}\nepoch,loss\n", self.provenance());
        for (i, v) in curve.iter().enumerate() {
            let _ = writeln!(csv, "{i},{v:e}");
        }
        let path = self.dir.join(name);
        fs::create_dir_all(&self.dir).map_err(|e| runtime(e.into()))?;
        fs::write(&path, csv).map_err(|e| runtime(e.into()))?;
        Ok(path)
    }
}

fn generate(common: Common, samples: Option<usize>) -> Result<(), Failure> {
    let mut run = Run::open(common)?;
    if let Some(n) = samples {
        run.cfg.dataset.samples = n;
    }
    if let Some(s) = run.common.seed {
        run.cfg.seeds.data = s;
    }
    let data = pipeline::generate(&run.cfg, run.common.threads).map_err(runtime)?;
    let dir = run.data_dir();
    data.save(&dir).map_err(runtime)?;
    println!(
        "generated {} trajectories ({} train, {} test, {} failed) in {}",
        data.len(),
        data.train_indices().len(),
        data.test_indices().len(),
        data.manifest.failures.len(),
        dir.display()
    );
    Ok(())
}

fn train_operator(common: Common, epochs: Option<usize>) -> Result<(), Failure> {
    let mut run = Run::open(common)?;
    if let Some(e) = epochs {
        run.cfg.operator.train.epochs = e;
    }
    if let Some(s) = run.common.seed {
        run.cfg.seeds.operator = s;
    }
    let data = run.load_data()?;
    let stage = pipeline::train_operator_stage(&run.cfg, &data).map_err(runtime)?;
    let curve = run.write_curve("operator_curve.csv", &stage.fit.curve)?;
    let ckpt = run.dir.join("operator.ckpt");
    save_operator(&stage.fit.model, Some(&run.hash), &ckpt).map_err(runtime)?;
    println!("operator checkpoint: {}", ckpt.display());
    println!("training curve: {}", curve.display());
    match stage.test_rel_l2 {
        Some(v) => println!("test relative L2: {v:.17e}"),
        None => println!("test relative L2: n/a (empty test split)"),
    }
    if let FitStatus::Diverged { epoch } = stage.fit.status {
        return Err(Failure::new(1, format!("operator training diverged at epoch {epoch}")));
    }
    Ok(())
}

fn train_policy(common: Common, operator: Option<PathBuf>, epochs: Option<usize>) -> Result<(), Failure> {
    let mut run = Run::open(common)?;
    if let Some(e) = epochs {
        run.cfg.policy.train.epochs = e;
    }
    if let Some(s) = run.common.seed {
        run.cfg.seeds.policy = s;
    }
    let model = run.load_operator(operator)?;
    let data = run.load_data_if_needed()?;
    let fit = pipeline::train_policy_stage(&run.cfg, &model, data.as_ref()).map_err(runtime)?;
    let curve = run.write_curve("policy_curve.csv", &fit.curve)?;
    let ckpt = run.dir.join("policy.ckpt");
    save_policy(&fit.model, Some(&run.hash), &ckpt).map_err(runtime)?;
    let val = pipeline::policy_validation_loss(&run.cfg, &model, &fit.model, data.as_ref()).map_err(runtime)?;
    println!("policy checkpoint: {}", ckpt.display());
    println!("training curve: {}", curve.display());
    println!("validation loss: {val:.17e}");
    if let FitStatus::Diverged { epoch } = fit.status {
        return Err(Failure::new(1, format!("policy training diverged at step {epoch}")));
    }
    Ok(())
}

fn evaluate(
    common: Common,
    operator: Option<PathBuf>,
    policy: Option<PathBuf>,
    n_eval: Option<usize>,
) -> Result<(), Failure> {
    let mut run = Run::open(common)?;
    let n_eval = n_eval.unwrap_or(run.cfg.evaluation.n_eval);
    if n_eval == 0 {
        return Err(Failure::new(USAGE, "--n-eval must be positive"));
    }
    if let Some(s) = run.common.seed {
        run.cfg.seeds.eval = s;
    }
    let op = run.load_operator(operator)?;
    let pol = run.load_policy(policy)?;
    let data = run.load_data_if_needed()?;
    let report = pipeline::evaluate_stage(&run.cfg, &op, &pol, data.as_ref(), n_eval, run.common.threads)
        .map_err(runtime)?;
    let out = run.dir.join("eval");
    write_report(&report, &out, &run.provenance()).map_err(runtime)?;
    println!("report: {}", out.display());
    if !report.records.is_empty() {
        let (n, t, c) = (report.natural_fdm(), report.ctrl_tidon(), report.ctrl_fdm());
        println!("natural (FDM)       {:.6e} +- {:.6e}", n.mean, n.std);
        println!("controlled (TI-DON) {:.6e} +- {:.6e}", t.mean, t.std);
        println!("controlled (FDM)    {:.6e} +- {:.6e}", c.mean, c.std);
        println!("ratio {:.6e}  transfer gap {:.6e}", report.ratio(), report.transfer_gap());
    }
    if report.is_degenerate() {
        eprintln!("warning: statistics from fewer than two scenarios");
    }
    let failed = report.gate(run.cfg.evaluation.max_ratio, run.cfg.evaluation.max_transfer_gap);
    if failed.is_empty() {
        println!("all acceptance thresholds met");
        Ok(())
    } else {
        Err(Failure::new(GATE, format!("acceptance failed:\n  {}", failed.join("\n  "))))
    }
}

fn inspect(path: &Path) -> Result<(), Failure> {
    let json = if path.is_dir() {
        let manifest = path.join("manifest.json");
        let text = fs::read_to_string(&manifest).map_err(|e| artifact("manifest", &manifest)(e.into()))?;
        let mut v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| artifact("manifest", &manifest)(e.into()))?;
        // the entry list is long; summarize it
        if let Some(obj) = v.as_object_mut() {
            let n = obj.get("entries").and_then(|e| e.as_array()).map_or(0, Vec::len);
            obj.insert("entries".into(), serde_json::json!(n));
        }
        v
    } else {
        let ck = Checkpoint::load(path).map_err(artifact("checkpoint", path))?;
        serde_json::to_value(&ck.header).map_err(|e| runtime(e.into()))?
    };
    println!("{}", serde_json::to_string_pretty(&json).expect("serializable"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { common, samples } => generate(common, samples),
        Command::TrainOperator { common, epochs } => train_operator(common, epochs),
        Command::TrainPolicy {
            common,
            operator,
            epochs,
        } => train_policy(common, operator, epochs),
        Command::Evaluate {
            common,
            operator,
            policy,
            n_eval,
        } => evaluate(common, operator, policy, n_eval),
        Command::Inspect { path } => inspect(&path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
