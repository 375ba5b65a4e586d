mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Warm-started Bayesian hyperparameter optimization on synthetic task families.
#[derive(Parser)]
#[command(name = "warmbo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic history store and its held-out test tasks.
    #[command(args_override_self = true)]
    MakeCollection(MakeCollectionArgs),
    /// Train the dataset metric and embed every stored dataset.
    #[command(args_override_self = true)]
    TrainMetric(TrainMetricArgs),
    /// Optimize one held-out task.
    #[command(args_override_self = true)]
    Run(RunArgs),
    /// Compare initializations across held-out tasks, acquisitions and seeds.
    #[command(args_override_self = true)]
    Compare(CompareArgs),
    /// Subtracted CCoV of every record in a store.
    #[command(args_override_self = true)]
    Ccov(CcovArgs),
    /// Draw an initial design on the unit cube.
    #[command(args_override_self = true)]
    Sample(SampleArgs),
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct MakeCollectionArgs {
    /// Key-value config file or run manifest.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub families: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    pub fractions: Vec<f64>,
    /// Instance dimension; defaults to 16, or 8 with --realizable.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance_dim: Option<usize>,
    /// Instances of a full-size task; defaults to 200, or 64 with --realizable.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instances_per_task: Option<usize>,
    /// Evaluation grid size; defaults to 64, or 32 with --realizable.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_size: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub bumps: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Held-out test tasks; defaults to min(4, families).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Build the metric-learning check store instead of task families.
    #[arg(long)]
    pub realizable: bool,
    /// Records in the realizable store.
    #[arg(long, default_value_t = 24)]
    pub records: usize,
    /// Space definition (JSON); defaults to the six-dimensional CNN space.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub space: Option<PathBuf>,
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainMetricArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub tau: usize,
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_pairs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub step_size: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Held-out record pairs; defaults to min(20, a quarter of all pairs).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_pairs: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    pub extractor: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "256,256")]
    pub head: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    pub meta_dim: usize,
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub store: PathBuf,
    /// Held-out task file; defaults to heldout.json beside the store.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tasks: Option<PathBuf>,
    /// Task id; defaults to the first task in the file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    /// uniform, latin, halton or warmstart.
    #[arg(long, default_value = "uniform")]
    pub init: String,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Total evaluation budget.
    #[arg(long = "T", default_value_t = 15)]
    #[serde(rename = "T")]
    pub budget: usize,
    #[arg(long, default_value = "ei")]
    pub acq: String,
    #[arg(long, default_value_t = 2.0)]
    pub kappa: f64,
    #[arg(long, default_value_t = 2048)]
    pub maximizer_budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wing: Option<PathBuf>,
    /// Defaults to metafeatures.json beside the wing.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metafeatures: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct CompareArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tasks: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wing: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metafeatures: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "uniform,latin,halton,warmstart")]
    pub methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "ei,ucb")]
    pub acqs: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long = "T", default_value_t = 15)]
    #[serde(rename = "T")]
    pub budget: usize,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2.0)]
    pub kappa: f64,
    #[arg(long, default_value_t = 2048)]
    pub maximizer_budget: usize,
    /// Cells evaluated concurrently.
    #[arg(long, default_value_t = 1)]
    #[serde(skip)]
    pub jobs: usize,
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct CcovArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub store: PathBuf,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SampleArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// uniform, latin or halton.
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// How a command failed, which decides the exit code.
pub enum Failure {
    /// Bad flags, config or inputs: exit 2.
    Usage(anyhow::Error),
    /// Failure while running: exit 1.
    Runtime(anyhow::Error),
}

fn main() -> ExitCode {
    let argv = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::MakeCollection(a) => commands::make_collection(a),
        Command::TrainMetric(a) => commands::train_metric(a),
        Command::Run(a) => commands::run(a),
        Command::Compare(a) => commands::compare(a),
        Command::Ccov(a) => commands::ccov(a),
        Command::Sample(a) => commands::sample(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
