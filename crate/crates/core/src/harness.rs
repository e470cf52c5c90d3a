//! Experiment presets, repeated seeded runs, and output files.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::MmdEnergy;
use crate::error::Error as InputError;
use crate::flows::{
    run_ift, run_mmd_flow, run_wfr, FlowConfig, FlowError, MmdStepMode, ProxAnchor, Trace, TransportScaling,
};
use crate::kernels::{BandwidthConvention, KernelSpec};
use crate::measures::{sample_target_with, GaussianComponent, ParticleMeasure, TargetSpec, TargetVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ift,
    MmdFlow,
    MmdFlowNoisy,
    Wfr,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ift, Method::MmdFlow, Method::MmdFlowNoisy, Method::Wfr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ift => "ift",
            Method::MmdFlow => "mmd_flow",
            Method::MmdFlowNoisy => "mmd_flow_noisy",
            Method::Wfr => "wfr",
        }
    }

    /// Splitting methods spend two steps per iteration.
    pub fn steps_per_iteration(self) -> usize {
        match self {
            Method::Ift | Method::Wfr => 2,
            Method::MmdFlow | Method::MmdFlowNoisy => 1,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = InputError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| InputError::invalid(format!("unknown method {s:?}")))
    }
}

/// Everything needed to reproduce one experiment.
///
/// `flow.iterations` counts iterations of the splitting methods; the
/// single-step baselines run twice as many steps so that every method gets
/// the same step budget. `flow.seed` is the base seed: repeat `r` uses
/// `flow.seed + r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub initial: TargetSpec,
    pub target: TargetSpec,
    pub kernel: KernelSpec,
    pub flow: FlowConfig,
    pub method: Method,
    /// Methods run by `compare` when none are given.
    #[serde(default)]
    pub compare_methods: Vec<Method>,
    pub repeats: usize,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), InputError> {
        if self.repeats == 0 {
            return Err(InputError::invalid("repeats must be at least 1"));
        }
        if self.initial.dim() != self.target.dim() {
            return Err(InputError::DimensionMismatch {
                expected: self.target.dim(),
                found: self.initial.dim(),
            });
        }
        self.flow.validate()
    }

    pub fn with_method(&self, method: Method) -> Self {
        Self {
            method,
            ..self.clone()
        }
    }

    /// Flow configuration for `self.method` at repeat `r`.
    pub fn flow_for_repeat(&self, r: usize) -> FlowConfig {
        let mut cfg = self.flow.clone();
        cfg.seed = self.flow.seed.wrapping_add(r as u64);
        cfg.iterations = self.flow.iterations * 2 / self.method.steps_per_iteration();
        if self.method != Method::MmdFlowNoisy {
            cfg.noise_level = 0.0;
            cfg.noise_off_iteration = 0;
        }
        cfg
    }

    /// Initial particles and target samples for repeat `r`.
    pub fn sample_repeat(&self, r: usize) -> Result<(ParticleMeasure, ParticleMeasure), InputError> {
        let seed = self.flow.seed.wrapping_add(r as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let initial = sample_target_with(&self.initial, &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let target = sample_target_with(&self.target, &mut rng)?;
        Ok((initial, target))
    }
}

fn gaussian(mean: Vec<f64>, covariance: Vec<Vec<f64>>, samples: usize) -> TargetSpec {
    TargetSpec {
        variant: TargetVariant::Gaussian { mean, covariance },
        samples,
    }
}

fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn base_flow() -> FlowConfig {
    FlowConfig {
        tau: 50.0,
        transport_scaling: TransportScaling::PerParticleMass,
        eta: 0.1,
        prox_tradeoff: 0.1,
        pgd_step: None,
        mmd_step_mode: MmdStepMode::SinglePgd,
        prox_anchor: ProxAnchor::OldLocations,
        noise_level: 10.0,
        noise_off_iteration: 3000,
        iterations: 3000,
        snapshot_every: 100,
        loss_every: 1,
        seed: 0,
        ..FlowConfig::default()
    }
}

/// The three reference experiments: `gaussian2d`, `mixture2d`, `mixture100d`.
///
/// In 2D, bandwidth 10 and step 50 are read as `k = exp(-r^2 / 10)` and a
/// position step of `50 / n`. With `exp(-r^2 / 200)` and an absolute step of
/// 50 the fixed-weight flow converges without stranded particles and the
/// comparisons between methods are lost. In 100D the narrow reading makes
/// every off-diagonal kernel value about `e^-20`, so nothing moves; there the
/// default convention and an absolute step are used.
pub fn builtin_experiments() -> Vec<ExperimentSpec> {
    let n = 100;
    let kernel = KernelSpec::with_convention(10.0, BandwidthConvention::Sigma).expect("positive bandwidth");
    let skewed = vec![vec![1.0, 0.5], vec![0.5, 2.0]];
    let initial_2d = gaussian(vec![5.0, 5.0], identity(2), n);

    let gaussian2d = ExperimentSpec {
        name: "gaussian2d".into(),
        initial: initial_2d.clone(),
        target: gaussian(vec![0.0, 0.0], skewed.clone(), n),
        kernel,
        flow: base_flow(),
        method: Method::Ift,
        compare_methods: vec![Method::Ift, Method::MmdFlow, Method::MmdFlowNoisy],
        repeats: 50,
    };

    let third = 1.0 / 3.0;
    let mixture2d = ExperimentSpec {
        name: "mixture2d".into(),
        target: TargetSpec {
            variant: TargetVariant::Mixture {
                components: vec![
                    GaussianComponent {
                        weight: third,
                        mean: vec![0.0, 0.0],
                        covariance: skewed,
                    },
                    GaussianComponent {
                        weight: third,
                        mean: vec![3.0, -1.0],
                        covariance: identity(2),
                    },
                    GaussianComponent {
                        weight: third,
                        mean: vec![1.0, 4.0],
                        covariance: vec![vec![3.0, 0.5], vec![0.5, 1.0]],
                    },
                ],
            },
            samples: n,
        },
        ..gaussian2d.clone()
    };

    let d = 100;
    let mixture100d = ExperimentSpec {
        name: "mixture100d".into(),
        initial: gaussian(vec![0.0; d], identity(d), n),
        target: TargetSpec {
            variant: TargetVariant::RandomMixture {
                dim: d,
                components: 3,
                mean_norm: 20.0,
                min_eigenvalue: 0.5,
                structure_seed: 0,
            },
            samples: n,
        },
        kernel: KernelSpec::gaussian(10.0).expect("positive bandwidth"),
        flow: FlowConfig {
            transport_scaling: TransportScaling::Absolute,
            iterations: 4500,
            noise_off_iteration: 4000,
            loss_every: 10,
            ..base_flow()
        },
        method: Method::Ift,
        compare_methods: vec![Method::Ift, Method::Wfr, Method::MmdFlowNoisy],
        repeats: 10,
    };

    vec![gaussian2d, mixture2d, mixture100d]
}

pub fn builtin_experiment(name: &str) -> Option<ExperimentSpec> {
    builtin_experiments().into_iter().find(|e| e.name == name)
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Input(#[from] InputError),

    #[error("all {repeats} repeats failed; first error: {first}")]
    AllRepeatsFailed { repeats: usize, first: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("unknown experiment {0:?}")]
    UnknownExperiment(String),
}

impl HarnessError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Input(_) => "invalid_input",
            HarnessError::AllRepeatsFailed { .. } => "run_failed",
            HarnessError::Io { .. } => "io",
            HarnessError::Json { .. } => "json",
            HarnessError::Csv { .. } => "csv",
            HarnessError::UnknownExperiment(_) => "unknown_experiment",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatFailure {
    pub repeat: usize,
    pub message: String,
}

/// Mean and standard deviation (population, ddof 0) of the loss over the
/// successful repeats, on the common step grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: String,
    pub method: Method,
    pub steps: Vec<usize>,
    pub mean_loss: Vec<f64>,
    pub std_loss: Vec<f64>,
    /// `None` for repeats that failed.
    pub final_losses: Vec<Option<f64>>,
    pub failures: Vec<RepeatFailure>,
    pub wall_seconds: Vec<f64>,
}

impl RunSummary {
    pub fn mean_at(&self, step: usize) -> Option<f64> {
        self.steps
            .binary_search(&step)
            .ok()
            .map(|i| self.mean_loss[i])
    }

    pub fn final_mean(&self) -> Option<f64> {
        self.mean_loss.last().copied()
    }

    pub fn total_seconds(&self) -> f64 {
        self.wall_seconds.iter().sum()
    }
}

pub struct ExperimentOutcome {
    pub summary: RunSummary,
    /// One entry per repeat; `None` where the repeat failed.
    pub traces: Vec<Option<Trace>>,
}

impl ExperimentOutcome {
    pub fn first_trace(&self) -> Option<&Trace> {
        self.traces.iter().flatten().next()
    }
}

/// Runs one repeat of `spec.method`.
pub fn run_repeat(spec: &ExperimentSpec, r: usize) -> Result<Trace, FlowError> {
    let (initial, target) = spec.sample_repeat(r)?;
    let energy = MmdEnergy::new(spec.kernel, target)?;
    let cfg = spec.flow_for_repeat(r);
    let result = match spec.method {
        Method::Ift => run_ift(&energy, &initial, &cfg),
        Method::Wfr => run_wfr(&energy, &initial, &cfg),
        Method::MmdFlow | Method::MmdFlowNoisy => run_mmd_flow(&energy, &initial, &cfg),
    };
    result.map_err(|f| f.error)
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunSummary, HarnessError> {
    run_experiment_with_traces(spec).map(|o| o.summary)
}

/// Runs every repeat (in parallel) and aggregates the loss curves.
pub fn run_experiment_with_traces(spec: &ExperimentSpec) -> Result<ExperimentOutcome, HarnessError> {
    spec.validate()?;
    let results: Vec<(Result<Trace, FlowError>, f64)> = (0..spec.repeats)
        .into_par_iter()
        .map(|r| {
            let start = Instant::now();
            let result = run_repeat(spec, r);
            (result, start.elapsed().as_secs_f64())
        })
        .collect();

    let mut traces = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    let mut wall_seconds = Vec::with_capacity(results.len());
    for (r, (result, secs)) in results.into_iter().enumerate() {
        wall_seconds.push(secs);
        match result {
            Ok(t) => traces.push(Some(t)),
            Err(e) => {
                log::warn!("{} / {} repeat {r} failed: {e}", spec.name, spec.method);
                failures.push(RepeatFailure {
                    repeat: r,
                    message: e.to_string(),
                });
                traces.push(None);
            }
        }
    }

    let ok: Vec<&Trace> = traces.iter().flatten().collect();
    let Some(first) = ok.first() else {
        return Err(HarnessError::AllRepeatsFailed {
            repeats: spec.repeats,
            first: failures.first().map(|f| f.message.clone()).unwrap_or_default(),
        });
    };
    let steps: Vec<usize> = first.losses.iter().map(|r| r.step).collect();
    let count = ok.len() as f64;
    let mut mean_loss = Vec::with_capacity(steps.len());
    let mut std_loss = Vec::with_capacity(steps.len());
    for k in 0..steps.len() {
        let mean = ok.iter().map(|t| t.losses[k].loss).sum::<f64>() / count;
        let var = ok.iter().map(|t| (t.losses[k].loss - mean).powi(2)).sum::<f64>() / count;
        mean_loss.push(mean);
        std_loss.push(var.sqrt());
    }

    let summary = RunSummary {
        experiment: spec.name.clone(),
        method: spec.method,
        steps,
        mean_loss,
        std_loss,
        final_losses: traces.iter().map(|t| t.as_ref().and_then(Trace::final_loss)).collect(),
        failures,
        wall_seconds,
    };
    Ok(ExperimentOutcome { summary, traces })
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    mean_loss: f64,
    std_loss: f64,
}

#[derive(Serialize)]
struct SnapshotLine<'a> {
    step: usize,
    locations: &'a crate::points::PointCloud,
    weights: &'a [f64],
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `losses.csv`, `trajectory.jsonl` and `config.json` into `out_dir`.
pub fn write_outputs(
    spec: &ExperimentSpec,
    summary: &RunSummary,
    trace: &Trace,
    out_dir: &Path,
) -> Result<(), HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let losses = out_dir.join("losses.csv");
    let csv_err = |source| HarnessError::Csv {
        path: losses.clone(),
        source,
    };
    let mut writer = csv::Writer::from_path(&losses).map_err(csv_err)?;
    for ((step, mean_loss), std_loss) in summary.steps.iter().zip(&summary.mean_loss).zip(&summary.std_loss) {
        writer
            .serialize(LossRow {
                step: *step,
                mean_loss: *mean_loss,
                std_loss: *std_loss,
            })
            .map_err(csv_err)?;
    }
    writer.flush().map_err(io_err(&losses))?;

    let trajectory = out_dir.join("trajectory.jsonl");
    let file = File::create(&trajectory).map_err(io_err(&trajectory))?;
    let mut out = BufWriter::new(file);
    for snap in &trace.snapshots {
        snap.measure.validate_probability()?;
        let line = SnapshotLine {
            step: snap.step,
            locations: &snap.measure.locations,
            weights: &snap.measure.weights,
        };
        serde_json::to_writer(&mut out, &line).map_err(|source| HarnessError::Json {
            path: trajectory.clone(),
            source,
        })?;
        out.write_all(b"\n").map_err(io_err(&trajectory))?;
    }
    out.flush().map_err(io_err(&trajectory))?;

    let config = out_dir.join("config.json");
    let json = serde_json::to_string_pretty(spec).map_err(|source| HarnessError::Json {
        path: config.clone(),
        source,
    })?;
    fs::write(&config, json + "\n").map_err(io_err(&config))?;
    Ok(())
}

/// Loads a builtin experiment by name, or an [`ExperimentSpec`] JSON file.
pub fn load_experiment(name_or_path: &str) -> Result<ExperimentSpec, HarnessError> {
    if let Some(spec) = builtin_experiment(name_or_path) {
        return Ok(spec);
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        return Err(HarnessError::UnknownExperiment(name_or_path.to_string()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let spec: ExperimentSpec = serde_json::from_str(&text).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    spec.validate()?;
    Ok(spec)
}
