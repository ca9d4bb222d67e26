//! Open-loop training data from the reference solver.
//!
//! Each sample draws a GRF initial state and a perturbed-sinusoid amplitude
//! sequence at the control rate, holds the amplitudes over `stride` solver
//! steps and records the state every `record_stride` solver steps (every
//! step by default). Samples use their own random stream, so the data does
//! not depend on thread count or order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::generate_amplitudes_with;
use crate::error::{Error, Result};
use crate::field::{ControlAmplitudes, Field, Trajectory};
use crate::grf::{GrfConfig, GrfSampler};
use crate::problem::{hold, Problem, ProblemConfig};
use crate::rng::{mix64, stream_rng};
use crate::solvers::rollout_fdm;
use crate::TOOL_VERSION;

const MAGIC: &[u8; 8] = b"PDPCTRJ\0";
const FORMAT_VERSION: u32 = 2;
const MAX_FAILURE_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub samples: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Keep every `record_stride`-th solver state; must divide the control
    /// stride.
    #[serde(default = "default_record_stride")]
    pub record_stride: usize,
}

fn default_record_stride() -> usize {
    1
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Deterministic split from the sample index alone.
pub fn split_of(index: usize, test_fraction: f64) -> Split {
    let u = (mix64(index as u64) >> 11) as f64 / (1u64 << 53) as f64;
    if u < test_fraction {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub split: Split,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub index: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub tool_version: String,
    #[serde(default)]
    pub config_hash: Option<String>,
    pub problem: ProblemConfig,
    pub grf: GrfConfig,
    pub dataset: DatasetConfig,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    pub failures: Vec<FailureRecord>,
}

/// Trajectories as recorded: `fields` holds every `record_stride`-th solver
/// state and `amplitudes[k]` is the vector applied from `fields[k]` on.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    problem: Problem,
    trajectories: Vec<Trajectory>,
}

/// One sample at full solver resolution.
pub fn generate_sample(problem: &Problem, sampler: &GrfSampler, seed: u64, index: usize) -> Result<Trajectory> {
    let mut rng = stream_rng(seed, index as u64);
    let u0 = sampler.sample_with(&mut rng);
    let amps = generate_amplitudes_with(&problem.cfg.basis, problem.n_op(), &mut rng);
    let mut traj = rollout_fdm(&u0, &hold(&amps, problem.stride()), &problem.solver, &problem.basis)?;
    traj.seed = Some(index as u64);
    Ok(traj)
}

pub fn generate_dataset(problem_cfg: &ProblemConfig, grf: &GrfConfig, cfg: &DatasetConfig, seed: u64, threads: usize) -> Result<Dataset> {
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::Config("test fraction must lie in [0, 1)".into()));
    }
    let problem = Problem::new(problem_cfg.clone())?;
    let sampler = GrfSampler::new(grf, &problem.grid)?;
    let threads = threads.max(1).min(cfg.samples.max(1));
    let stride = cfg.record_stride;
    if stride == 0 || problem.stride() % stride != 0 {
        return Err(Error::Config(format!(
            "record stride {stride} must divide the control stride {}",
            problem.stride()
        )));
    }

    let run = |worker: usize| -> Vec<(usize, Result<Trajectory>)> {
        (worker..cfg.samples)
            .step_by(threads)
            .map(|i| (i, generate_sample(&problem, &sampler, seed, i).map(|t| t.subsample(stride))))
            .collect()
    };
    let mut results: Vec<(usize, Result<Trajectory>)> = if threads == 1 {
        run(0)
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads).map(|w| s.spawn(move || run(w))).collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };
    results.sort_by_key(|(i, _)| *i);

    let mut entries = Vec::new();
    let mut failures = Vec::new();
    let mut trajectories = Vec::new();
    for (index, r) in results {
        match r {
            Ok(t) => {
                entries.push(ManifestEntry {
                    index,
                    split: split_of(index, cfg.test_fraction),
                    file: format!("traj_{index:06}.bin"),
                });
                trajectories.push(t);
            }
            Err(e) => failures.push(FailureRecord {
                index,
                reason: e.to_string(),
            }),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_FRACTION * cfg.samples as f64 {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total: cfg.samples,
        });
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: FORMAT_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            config_hash: None,
            problem: problem_cfg.clone(),
            grf: grf.clone(),
            dataset: cfg.clone(),
            seed,
            entries,
            failures,
        },
        problem,
        trajectories,
    })
}

/// A single transition at the control rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub u: Field,
    pub amps: ControlAmplitudes,
    pub u_next: Field,
}

/// Transitions between solver-rate states `stride` steps apart.
pub fn to_transitions(traj: &Trajectory, stride: usize) -> Result<Vec<Transition>> {
    if stride == 0 || traj.n_steps() % stride != 0 {
        return Err(Error::Config(format!(
            "stride {stride} does not divide the {} trajectory steps",
            traj.n_steps()
        )));
    }
    Ok((0..traj.n_steps() / stride)
        .map(|k| Transition {
            u: traj.fields[k * stride].clone(),
            amps: traj.amplitudes[k * stride].clone(),
            u_next: traj.fields[(k + 1) * stride].clone(),
        })
        .collect())
}

impl Dataset {
    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectory(&self, i: usize) -> &Trajectory {
        &self.trajectories[i]
    }

    /// Recorded steps per control step.
    pub fn op_stride(&self) -> usize {
        self.problem.stride() / self.manifest.dataset.record_stride
    }

    /// Trajectory `i` at the control rate.
    pub fn op_trajectory(&self, i: usize) -> Trajectory {
        self.trajectories[i].subsample(self.op_stride())
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    fn positions(&self, split: Split) -> Vec<usize> {
        self.manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(p, _)| p)
            .collect()
    }

    /// Positions (not sample indices) of training trajectories.
    pub fn train_indices(&self) -> Vec<usize> {
        self.positions(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.positions(Split::Test)
    }

    pub fn n_x(&self) -> usize {
        self.problem.n_x()
    }

    pub fn n_actuators(&self) -> usize {
        self.problem.n_actuators()
    }

    pub fn a_max(&self) -> f64 {
        self.problem.a_max()
    }

    pub fn grid_x(&self) -> Vec<f64> {
        self.problem.grid.x.clone()
    }

    pub fn stride(&self) -> usize {
        self.problem.stride()
    }

    pub fn dt_op(&self) -> f64 {
        self.problem.dt_op()
    }

    /// Tool version and config hash, embedded in every trajectory file.
    pub fn provenance(&self) -> String {
        format!(
            "tool_version={} config_hash={}",
            self.manifest.tool_version,
            self.manifest.config_hash.as_deref().unwrap_or("none")
        )
    }

    /// Writes `manifest.json` and one binary file per trajectory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (entry, traj) in self.manifest.entries.iter().zip(&self.trajectories) {
            write_trajectory(&dir.join(&entry.file), traj, &self.provenance())?;
        }
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&path)?)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(&path, format!("unsupported format version {}", manifest.format_version)));
        }
        let problem = Problem::new(manifest.problem.clone())?;
        let trajectories = manifest
            .entries
            .iter()
            .map(|e| {
                let mut t = read_trajectory(&dir.join(&e.file))?;
                let expected = problem.cfg.pde.n_steps() / manifest.dataset.record_stride.max(1);
                if t.fields[0].len() != problem.n_x() || t.n_steps() != expected {
                    return Err(Error::format(dir.join(&e.file), "dimensions disagree with the manifest"));
                }
                t.seed = Some(e.index as u64);
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest,
            problem,
            trajectories,
        })
    }
}

// Header: magic, then u32 version, n_x, n_steps, n_actuators and the length
// of the provenance string that follows.
const HEADER: usize = 28;

fn write_trajectory(path: &Path, t: &Trajectory, provenance: &str) -> Result<()> {
    let n_x = t.fields[0].len();
    let n_a = t.amplitudes.first().map_or(0, |a| a.len());
    let mut buf = Vec::with_capacity(HEADER + provenance.len() + 8 * (t.fields.len() * n_x + t.n_steps() * n_a));
    buf.extend_from_slice(MAGIC);
    for v in [FORMAT_VERSION, n_x as u32, t.n_steps() as u32, n_a as u32, provenance.len() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(provenance.as_bytes());
    for v in t.fields.iter().flat_map(|f| f.iter()).chain(t.amplitudes.iter().flat_map(|a| a.iter())) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < HEADER || &buf[..8] != MAGIC {
        return Err(Error::format(path, "missing trajectory header"));
    }
    let word = |i: usize| u32::from_le_bytes(buf[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (version, n_x, n_steps, n_a, n_prov) = (word(0), word(1), word(2), word(3), word(4));
    if version != FORMAT_VERSION as usize {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let start = HEADER + n_prov;
    let count = (n_steps + 1) * n_x + n_steps * n_a;
    if buf.len() != start + 8 * count {
        return Err(Error::format(path, format!("expected {} bytes, found {}", start + 8 * count, buf.len())));
    }
    let values: Vec<f64> = buf[start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let (fields, amps) = values.split_at((n_steps + 1) * n_x);
    let mut t = Trajectory::new(Field(fields[..n_x].to_vec()));
    for k in 0..n_steps {
        t.push(
            ControlAmplitudes(amps[k * n_a..(k + 1) * n_a].to_vec()),
            Field(fields[(k + 1) * n_x..(k + 2) * n_x].to_vec()),
        );
    }
    Ok(t)
}
