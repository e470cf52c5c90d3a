use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use iftflow::harness::{load_experiment, run_experiment_with_traces, write_outputs, ExperimentSpec, HarnessError};
use iftflow::{oracle, Method};

#[derive(Parser)]
#[command(name = "iftflow", version, about = "Particle gradient flows for MMD minimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Base seed; repeat r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Iterations of the splitting methods (baselines run twice as many steps).
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method of an experiment and write its outputs.
    Run {
        /// Builtin name (gaussian2d, mixture2d, mixture100d) or a spec JSON file.
        #[arg(long)]
        experiment: String,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        #[arg(long, env = "IFTFLOW_OUT")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run several methods; outputs go to <out>/<method>/.
    Compare {
        #[arg(long)]
        experiment: String,
        /// Comma-separated; defaults to the experiment's comparison set.
        #[arg(long, value_delimiter = ',', value_parser = parse_method)]
        methods: Vec<Method>,
        #[arg(long, env = "IFTFLOW_OUT")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Check the closed-form and brute-force references.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: iftflow::Error| e.to_string())
}

fn apply(mut spec: ExperimentSpec, o: &Overrides) -> ExperimentSpec {
    if let Some(seed) = o.seed {
        spec.flow.seed = seed;
    }
    if let Some(r) = o.repeats {
        spec.repeats = r;
    }
    if let Some(it) = o.iterations {
        spec.flow.iterations = it;
    }
    spec
}

fn run_one(spec: &ExperimentSpec, out: &Path) -> Result<(), HarnessError> {
    let outcome = run_experiment_with_traces(spec)?;
    let trace = outcome.first_trace().expect("at least one repeat succeeded");
    write_outputs(spec, &outcome.summary, trace, out)?;
    let s = &outcome.summary;
    println!(
        "{} {}: final mean loss {:e}, {} of {} repeats ok, {:.2}s",
        s.experiment,
        s.method,
        s.final_mean().unwrap_or(f64::NAN),
        spec.repeats - s.failures.len(),
        spec.repeats,
        s.total_seconds()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            experiment,
            method,
            out,
            overrides,
        } => load_experiment(&experiment).and_then(|spec| {
            let mut spec = apply(spec, &overrides);
            if let Some(m) = method {
                spec.method = m;
            }
            run_one(&spec, &out)
        }),
        Command::Compare {
            experiment,
            methods,
            out,
            overrides,
        } => load_experiment(&experiment).and_then(|spec| {
            let spec = apply(spec, &overrides);
            let methods = if methods.is_empty() {
                spec.compare_methods.clone()
            } else {
                methods
            };
            methods
                .into_iter()
                .try_for_each(|m| run_one(&spec.with_method(m), &out.join(m.name())))
        }),
        Command::OracleCheck { seed } => {
            let results = oracle::run_all(seed);
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if results.iter().all(|r| r.passed) {
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", json!({"error": {"kind": "oracle_failed", "message": "one or more oracle checks failed"}}));
            return ExitCode::FAILURE;
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": {"kind": e.kind(), "message": e.to_string()}}));
            ExitCode::FAILURE
        }
    }
}
