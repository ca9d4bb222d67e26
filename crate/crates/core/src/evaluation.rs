//! Closed-loop deployment on the surrogate and on the reference solver, and
//! the objective statistics reported for each experiment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::field::{ControlAmplitudes, Field, Trajectory};
use crate::operator::{rk4_step, OperatorModel};
use crate::policy::{curvature_slice, policy_forward, CostKind, LossGeometry, PolicyModel, Scenario, ScenarioParams, ScenarioSampler};
use crate::problem::Problem;
use crate::rng::derive_seed;

/// System advanced one control step at a time.
pub trait Plant {
    fn control_step(&self, u: &Field, amps: &ControlAmplitudes) -> Result<Field>;
}

/// The learned operator, one RK4 step per control step.
pub struct SurrogatePlant<'a> {
    pub model: &'a OperatorModel,
    pub dt_op: f64,
}

impl Plant for SurrogatePlant<'_> {
    fn control_step(&self, u: &Field, amps: &ControlAmplitudes) -> Result<Field> {
        rk4_step(self.model, u, amps, self.dt_op)
    }
}

/// The reference solver, holding the amplitudes over the solver substeps.
pub struct FdmPlant<'a> {
    pub problem: &'a Problem,
}

impl Plant for FdmPlant<'_> {
    fn control_step(&self, u: &Field, amps: &ControlAmplitudes) -> Result<Field> {
        self.problem.fdm_control_step(u, amps)
    }
}

/// Feedback law evaluated once per control step.
pub trait Controller {
    fn act(&mut self, u: &Field, scen: &ScenarioParams) -> Result<ControlAmplitudes>;
}

impl Controller for &PolicyModel {
    fn act(&mut self, u: &Field, scen: &ScenarioParams) -> Result<ControlAmplitudes> {
        policy_forward(self, u, scen)
    }
}

/// No actuation; gives the natural evolution.
pub struct ZeroController(pub usize);

impl Controller for ZeroController {
    fn act(&mut self, _: &Field, _: &ScenarioParams) -> Result<ControlAmplitudes> {
        Ok(ControlAmplitudes::zeros(self.0))
    }
}

/// Closed loop: the controller reads the plant state at every control
/// instant.
pub fn deploy_closed_loop(controller: &mut impl Controller, plant: &impl Plant, u0: &Field, scen: &ScenarioParams, steps: usize) -> Result<Trajectory> {
    let mut traj = Trajectory::new(u0.clone());
    for k in 0..steps {
        let u = traj.terminal();
        let a = controller.act(u, scen).map_err(|e| e.at_step(k))?;
        let next = plant.control_step(u, &a).map_err(|e| e.at_step(k))?;
        traj.push(a, next);
    }
    Ok(traj)
}

/// Physical objective of a control-rate trajectory, without penalties or
/// normalization: `sum_i (u_N - target)^2 dx` for tracking and
/// `sum_{k<N} dt sum_i (D2 u_k)^2 dx` for curvature.
pub fn objective_value(traj: &Trajectory, scen: &ScenarioParams, kind: CostKind, geom: &LossGeometry) -> Result<f64> {
    match kind {
        CostKind::TerminalTracking => {
            let target = scen
                .target
                .as_ref()
                .ok_or_else(|| Error::Config("terminal tracking objective needs a target".into()))?;
            let u = traj.terminal();
            if u.len() != target.len() {
                return Err(Error::Shape {
                    op: "objective_value",
                    lhs: vec![u.len()],
                    rhs: vec![target.len()],
                });
            }
            Ok(u.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * geom.dx)
        }
        CostKind::CurvatureIntegral => {
            let n = traj.n_steps();
            Ok(traj.fields[..n]
                .iter()
                .map(|u| curvature_slice(u, geom.dx, geom.bc))
                .sum::<f64>()
                * geom.dt_op)
        }
    }
}

/// Objectives of one evaluation scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioRecord {
    pub index: usize,
    pub natural_fdm: f64,
    pub ctrl_tidon: f64,
    pub ctrl_fdm: f64,
    /// Largest `|a|` applied on the reference plant.
    pub max_amplitude: f64,
    pub runtime_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColumnStats {
    pub mean: f64,
    /// Sample standard deviation; 0 when there is a single record.
    pub std: f64,
    pub median: f64,
}

impl ColumnStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        Self { mean, std, median }
    }
}

/// Trajectories of the first scenario, kept for plotting.
#[derive(Clone, Debug)]
pub struct ExampleRun {
    pub x: Vec<f64>,
    pub scenario: Scenario,
    pub natural: Trajectory,
    pub controlled: Trajectory,
    pub controlled_tidon: Trajectory,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub pde: String,
    pub kind: CostKind,
    pub records: Vec<ScenarioRecord>,
    /// Scenarios that failed on some plant, with the error.
    pub failures: Vec<(usize, String)>,
    pub example: Option<ExampleRun>,
}

impl EvalReport {
    fn column(&self, f: impl Fn(&ScenarioRecord) -> f64) -> ColumnStats {
        let v: Vec<f64> = self.records.iter().map(f).collect();
        ColumnStats::of(&v)
    }

    pub fn natural_fdm(&self) -> ColumnStats {
        self.column(|r| r.natural_fdm)
    }

    pub fn ctrl_tidon(&self) -> ColumnStats {
        self.column(|r| r.ctrl_tidon)
    }

    pub fn ctrl_fdm(&self) -> ColumnStats {
        self.column(|r| r.ctrl_fdm)
    }

    /// Statistics from a single scenario are degenerate.
    pub fn is_degenerate(&self) -> bool {
        self.records.len() < 2
    }

    pub fn ratio(&self) -> f64 {
        self.ctrl_fdm().mean / self.natural_fdm().mean
    }

    pub fn transfer_gap(&self) -> f64 {
        let fdm = self.ctrl_fdm().mean;
        (self.ctrl_tidon().mean - fdm).abs() / fdm
    }

    /// Failed gate checks, empty when both thresholds hold.
    pub fn gate(&self, max_ratio: f64, max_transfer_gap: f64) -> Vec<String> {
        let mut failed = Vec::new();
        if self.records.is_empty() {
            failed.push("no scenario completed".to_string());
            return failed;
        }
        let ratio = self.ratio();
        if !(ratio <= max_ratio) {
            failed.push(format!("controlled/natural ratio {ratio:.4e} exceeds {max_ratio:.4e}"));
        }
        let gap = self.transfer_gap();
        if !(gap <= max_transfer_gap) {
            failed.push(format!("surrogate-to-plant gap {gap:.4e} exceeds {max_transfer_gap:.4e}"));
        }
        if !self.failures.is_empty() {
            failed.push(format!("{} scenarios failed", self.failures.len()));
        }
        failed
    }
}

pub struct ComparisonSetup<'a> {
    pub name: &'a str,
    pub problem: &'a Problem,
    pub operator: &'a OperatorModel,
    pub policy: &'a PolicyModel,
    pub sampler: &'a ScenarioSampler,
    pub kind: CostKind,
    pub geom: LossGeometry,
}

fn run_scenario(s: &ComparisonSetup<'_>, scenario: &Scenario, index: usize) -> Result<(ScenarioRecord, ExampleRun)> {
    let start = Instant::now();
    let steps = s.problem.n_op();
    let fdm = FdmPlant { problem: s.problem };
    let surrogate = SurrogatePlant {
        model: s.operator,
        dt_op: s.problem.dt_op(),
    };
    let p = &scenario.params;
    let natural = deploy_closed_loop(&mut ZeroController(s.problem.n_actuators()), &fdm, &scenario.u0, p, steps)?;
    let controlled = deploy_closed_loop(&mut { s.policy }, &fdm, &scenario.u0, p, steps)?;
    let controlled_tidon = deploy_closed_loop(&mut { s.policy }, &surrogate, &scenario.u0, p, steps)?;
    let record = ScenarioRecord {
        index,
        natural_fdm: objective_value(&natural, p, s.kind, &s.geom)?,
        ctrl_tidon: objective_value(&controlled_tidon, p, s.kind, &s.geom)?,
        ctrl_fdm: objective_value(&controlled, p, s.kind, &s.geom)?,
        max_amplitude: controlled
            .amplitudes
            .iter()
            .flat_map(|a| a.iter())
            .fold(0.0, |m, v| m.max(v.abs())),
        runtime_s: start.elapsed().as_secs_f64(),
    };
    let example = ExampleRun {
        x: s.problem.grid.x.clone(),
        scenario: scenario.clone(),
        natural,
        controlled,
        controlled_tidon,
    };
    Ok((record, example))
}

/// Evaluates `n_eval` fresh scenarios on both plants. Scenario `j` depends
/// only on `(rng_seed, j)`, so results do not depend on `threads`.
pub fn build_comparison(setup: &ComparisonSetup<'_>, n_eval: usize, rng_seed: u64, threads: usize) -> Result<EvalReport> {
    if n_eval == 0 {
        return Err(Error::Config("n_eval must be positive".into()));
    }
    let seed = derive_seed(rng_seed, "evaluation");
    let threads = threads.clamp(1, n_eval);
    let work = |w: usize| -> Vec<(usize, Result<(ScenarioRecord, ExampleRun)>)> {
        (w..n_eval)
            .step_by(threads)
            .map(|j| (j, run_scenario(setup, &setup.sampler.scenario(seed, j as u64), j)))
            .collect()
    };
    let mut results = if threads == 1 {
        work(0)
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads).map(|w| s.spawn(move || work(w))).collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect::<Vec<_>>()
        })
    };
    results.sort_by_key(|(j, _)| *j);
    let mut report = EvalReport {
        pde: setup.name.to_string(),
        kind: setup.kind,
        records: Vec::new(),
        failures: Vec::new(),
        example: None,
    };
    for (j, r) in results {
        match r {
            Ok((rec, ex)) => {
                report.records.push(rec);
                if report.example.is_none() {
                    report.example = Some(ex);
                }
            }
            Err(e) => report.failures.push((j, e.to_string())),
        }
    }
    Ok(report)
}

pub const SUMMARY_HEADER: &str = "pde,natural_fdm_mean,natural_fdm_std,ctrl_tidon_mean,ctrl_tidon_std,ctrl_fdm_mean,ctrl_fdm_std";
pub const REPORT_HEADER: &str = "scenario,natural_fdm,ctrl_tidon,ctrl_fdm,max_amplitude,runtime_s,status";

/// Writes `report.csv`, `summary.csv` and `figures/*.svg` under `dir`.
pub fn write_report(report: &EvalReport, dir: &Path, provenance: &str) -> Result<()> {
    fs::create_dir_all(dir.join("figures"))?;
    let mut rows = format!("# {provenance}\n{REPORT_HEADER}\n");
    for r in &report.records {
        // runtime is wall-clock, written last so the rest is reproducible
        let _ = writeln!(
            rows,
            "{},{:e},{:e},{:e},{:e},{:.3},ok",
            r.index, r.natural_fdm, r.ctrl_tidon, r.ctrl_fdm, r.max_amplitude, r.runtime_s
        );
    }
    for (j, e) in &report.failures {
        let _ = writeln!(rows, "{j},,,,,,failed: {}", e.replace(',', ";"));
    }
    fs::write(dir.join("report.csv"), rows)?;

    let mut summary = format!("# {provenance}\n{SUMMARY_HEADER}\n");
    if !report.records.is_empty() {
        let (n, t, c) = (report.natural_fdm(), report.ctrl_tidon(), report.ctrl_fdm());
        let _ = writeln!(
            summary,
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            report.pde, n.mean, n.std, t.mean, t.std, c.mean, c.std
        );
    }
    fs::write(dir.join("summary.csv"), summary)?;

    if let Some(ex) = &report.example {
        write_figures(ex, report.kind, &dir.join("figures"))?;
    }
    Ok(())
}

const PALETTE: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"];

/// Polyline chart with a legend; no external plotting dependency.
pub fn line_chart(title: &str, x_label: &str, series: &[(&str, &[f64], &[f64])]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let mut xs = series.iter().flat_map(|s| s.1.iter().copied()).filter(|v| v.is_finite());
    let first = xs.next().unwrap_or(0.0);
    let (x0, x1) = xs.fold((first, first), |(a, b), v| (a.min(v), b.max(v)));
    let mut ys = series.iter().flat_map(|s| s.2.iter().copied()).filter(|v| v.is_finite());
    let first = ys.next().unwrap_or(0.0);
    let (y0, y1) = ys.fold((first, first), |(a, b), v| (a.min(v), b.max(v)));
    let (x1, y1) = (if x1 > x0 { x1 } else { x0 + 1.0 }, if y1 > y0 { y1 } else { y0 + 1.0 });
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n\
         <rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"5\" y=\"{}\">{y1:.3e}</text>\n<text x=\"5\" y=\"{}\">{y0:.3e}</text>\n",
        w / 2.0,
        w - 2.0 * m,
        h - 2.0 * m,
        w / 2.0,
        h - 15.0,
        m - 5.0,
        h - m + 15.0,
    );
    for (i, (label, x, y)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = x
            .iter()
            .zip(y.iter())
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(a, b)| format!("{:.2},{:.2}", px(*a), py(*b)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
        let ly = m + 15.0 + 15.0 * i as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\">{label}</text>",
            w - m - 150.0,
            w - m - 130.0,
            w - m - 125.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn write_figures(ex: &ExampleRun, kind: CostKind, dir: &Path) -> Result<()> {
    let x = &ex.x;
    let mut profiles: Vec<(&str, &[f64], &[f64])> = vec![
        ("initial", x, &ex.scenario.u0),
        ("final, natural", x, ex.natural.terminal()),
        ("final, controlled", x, ex.controlled.terminal()),
    ];
    if let Some(t) = &ex.scenario.params.target {
        profiles.push(("target", x, t));
    }
    fs::write(dir.join("states.svg"), line_chart("State profiles", "x", &profiles))?;

    let steps = ex.controlled.n_steps();
    let t: Vec<f64> = (0..steps).map(|k| k as f64).collect();
    let n_act = ex.controlled.amplitudes.first().map_or(0, |a| a.len());
    let traces: Vec<Vec<f64>> = (0..n_act)
        .map(|i| ex.controlled.amplitudes.iter().map(|a| a[i]).collect())
        .collect();
    let names: Vec<String> = (0..n_act).map(|i| format!("actuator {}", i + 1)).collect();
    let series: Vec<(&str, &[f64], &[f64])> = names
        .iter()
        .zip(&traces)
        .map(|(n, v)| (n.as_str(), t.as_slice(), v.as_slice()))
        .collect();
    fs::write(dir.join("controls.svg"), line_chart("Control amplitudes", "control step", &series))?;

    if kind == CostKind::CurvatureIntegral {
        let dx = x.get(1).map_or(1.0, |b| b - x[0]);
        let curve = |tr: &Trajectory| -> Vec<f64> {
            tr.fields
                .iter()
                .map(|u| curvature_slice(u, dx, crate::solvers::BoundaryCondition::Periodic))
                .collect()
        };
        let (a, b) = (curve(&ex.natural), curve(&ex.controlled));
        let t: Vec<f64> = (0..a.len()).map(|k| k as f64).collect();
        fs::write(
            dir.join("curvature.svg"),
            line_chart("Curvature over time", "control step", &[("natural", &t, &a), ("controlled", &t, &b)]),
        )?;
    }
    Ok(())
}
