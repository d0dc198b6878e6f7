//! collision-sentinel: generate data, score with the GMM baseline, train
//! and evaluate learned collision predictors, balance simulator runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use collision_sentinel::error::{Error as CoreError, ErrorClass};

use crate::config::ConfigError;

#[derive(Parser)]
#[command(
    name = "collision-sentinel",
    version,
    about = "Learned collision prediction for planned trajectories"
)]
struct Cli {
    /// TOML config laid over the preset
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Preset to start from: balanced or imbalanced
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Master seed. Overrides COLLISION_SENTINEL_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: available cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes, embed them and write a dataset
    GenData(GenDataArgs),
    /// Score a dataset with the Gaussian-mixture baseline
    Baseline(BaselineArgs),
    /// Train an ensemble on the training sequences of a dataset
    Train(TrainArgs),
    /// Score the held-out sequences with every trained model of a run
    Eval(EvalArgs),
    /// Choose per-pair simulator run counts (reads an id,c,t CSV)
    Balance(BalanceArgs),
    /// Rebuild tables, reports and curves of a run from its stored scores
    Report(ReportArgs),
    /// Full comparison: data, baseline, every model, table
    Bench(BenchArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output path prefix (writes <out>.manifest.json and <out>.blob)
    #[arg(long)]
    pub out: PathBuf,
    /// Subsample to this positive fraction
    #[arg(long)]
    pub imbalanced: Option<f64>,
    /// Keep the generator's class balance
    #[arg(long, conflicts_with = "imbalanced")]
    pub natural: bool,
    #[arg(long)]
    pub scenes_per_kind: Option<usize>,
}

#[derive(Args)]
pub struct BaselineArgs {
    /// Dataset path prefix
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Covariance scale at the first step (m²)
    #[arg(long)]
    pub sigma0: Option<f64>,
    /// Score with the log density
    #[arg(long)]
    pub log: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset path prefix
    #[arg(long)]
    pub dataset: PathBuf,
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
    /// catplan or mlp
    #[arg(long, default_value = "catplan")]
    pub arch: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub bags: Option<usize>,
    /// Focal alpha: a number or `auto`
    #[arg(long)]
    pub alpha: Option<String>,
    /// Mixup Beta concentration (0 disables)
    #[arg(long)]
    pub mixup: Option<f64>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Run directory written by `train` or `bench`
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset path prefix (default: the run's own test set)
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Args)]
pub struct BalanceArgs {
    /// CSV with header id,c,t
    #[arg(long)]
    pub stats: PathBuf,
    /// Output directory for balance.json
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub min_runs: Option<u64>,
    #[arg(long)]
    pub max_total_runs: Option<u64>,
    #[arg(long)]
    pub rate_lo: Option<f64>,
    #[arg(long)]
    pub rate_hi: Option<f64>,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
    /// Subsample train and test to this positive fraction
    #[arg(long)]
    pub imbalanced: Option<f64>,
    /// Bag counts to sweep for CATPlan, e.g. 1,2,3,4,6,12
    #[arg(long, value_delimiter = ',')]
    pub sweep_bags: Vec<usize>,
    /// Mixup concentrations to sweep for CATPlan, e.g. 0,1,2,3,4
    #[arg(long, value_delimiter = ',')]
    pub sweep_mixup: Vec<f64>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            };
        }
    }
    3
}

/// The error chain on one line. Core errors already fold their source into
/// their own message, so a cause that repeats the tail is dropped.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if out.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(ConfigError("--jobs must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ConfigError(format!("--jobs: {e}")))?;
    }
    let mut cfg = config::load(cli.config.as_deref(), cli.preset.as_deref(), cli.seed)?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(&mut cfg, &a),
        Command::Baseline(a) => commands::baseline(&mut cfg, &a),
        Command::Train(a) => commands::train(&mut cfg, &a),
        Command::Eval(a) => commands::eval(&mut cfg, &a),
        Command::Balance(a) => commands::balance(&mut cfg, &a),
        Command::Report(a) => commands::report(&mut cfg, &a),
        Command::Bench(a) => commands::bench(&mut cfg, &a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
