//! `ngfkt` command-line interface.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
/// Calibration stopped at `calibration.max_iters` without converging.
pub const EXIT_MAX_ITERS: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "ngfkt",
    version,
    about = "Knowledge tracing with calibrated skill graphs and forgetting-aware attention"
)]
#[command(after_long_help = config::keys_help(), after_help = config::keys_help())]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON file of dotted config keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.d_model=64`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory (same as `--set output=DIR`).
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate the skill relation matrix and the Q-matrix.
    Calibrate,
    /// Build GCN embeddings and the exercise relation matrix.
    Relations,
    /// Train the predictor and write the best checkpoint.
    Train,
    /// Score the held-out part of the data with a checkpoint.
    Eval(EvalArgs),
    /// Student-fraction and sequence-length cold-start experiments.
    Coldstart,
    /// Per-skill mastery of one student at several times.
    Radar(RadarArgs),
    /// Generate the planted-signal synthetic dataset.
    Synth,
    /// Run calibrate, embed, relation, train and eval in order.
    Pipeline,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Competing model predictions as NAME=predictions.csv, for PS.
    #[arg(long = "competitor", value_name = "NAME=FILE")]
    pub competitors: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RadarArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub student: String,
    /// Snapshot times in epoch seconds.
    #[arg(long, value_delimiter = ',', required = true)]
    pub times: Vec<i64>,
    /// Skill ids; all skills when omitted.
    #[arg(long, value_delimiter = ',')]
    pub skills: Vec<String>,
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match run_inner(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}

fn run_inner(cli: Cli) -> anyhow::Result<i32> {
    let mut overrides = cli.global.overrides.clone();
    if let Some(out) = &cli.global.output {
        overrides.push(format!("output={}", serde_json::Value::String(out.display().to_string())));
    }
    let cfg = RunConfig::load(cli.global.config.as_deref(), &overrides, std::env::var(config::SEED_ENV).ok())?;
    commands::dispatch(&cli.command, &cfg)
}
