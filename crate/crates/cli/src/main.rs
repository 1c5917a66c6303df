mod artifacts;
mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "learnds", version, about = "Train, evaluate and probe learned data structures")]
pub struct Cli {
    /// Base seed; overrides the seed in a config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory for every artifact the command writes.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Named experiment setting used when no config or spec file is given.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Worker threads; recorded in the run manifest.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample nearest-neighbor instances into a line-delimited file.
    Gen(GenArgs),
    /// Train a model and write checkpoint, CSV log and manifest.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint.
    Eval(EvalArgs),
    /// Evaluate a classical baseline.
    Baseline(BaselineArgs),
    /// Run an interpretability probe on a checkpoint.
    Probe(ProbeArgs),
    /// Join evaluation reports into tables and a chart.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Distribution spec (TOML).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Output file name inside the run directory.
    #[arg(long, default_value = "instances.jsonl")]
    pub file: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training config (TOML with an `[nn]` or `[freq]` table).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Validate and print the resolved config without training.
    #[arg(long)]
    pub dry_run: bool,
    /// Continue from the checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Override the step budget.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Stop (resumably) once this many steps have run.
    #[arg(long)]
    pub pause_at: Option<u64>,
    /// e2e, frozen, no_permute, non_adaptive or shared_loop.
    #[arg(long)]
    pub ablation: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint file, or a run directory holding `checkpoint.bin`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Instance file from `gen`; sampled from the training distribution if absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub instances: usize,
    /// Stream count for frequency checkpoints.
    #[arg(long, default_value_t = 1000)]
    pub streams: usize,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    /// binary, interpolation, kd_tree, lsh, random or cms.
    pub kind: String,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Lookup budget; defaults to the preset's.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    pub instances: usize,
    #[arg(long, default_value_t = 32)]
    pub w: usize,
    #[arg(long, default_value_t = 1)]
    pub d: usize,
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 1000)]
    pub universe: usize,
    #[arg(long, default_value_t = 1.2)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1000)]
    pub streams: usize,
    #[arg(long, default_value_t = 100)]
    pub stream_len: usize,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// histogram, adjacency, regression, partition or memory.
    pub kind: String,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub instances: usize,
    /// Zero-based lookup index for the histogram probe.
    #[arg(long, default_value_t = 0)]
    pub step: usize,
    #[arg(long, default_value_t = 4)]
    pub bins: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Report JSON files written by `eval` or `baseline`.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// File name prefix for the joined outputs.
    #[arg(long, default_value = "report")]
    pub name: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("learnds: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    match &cli.command {
        Command::Gen(a) => commands::gen(cli, a),
        Command::Train(a) => commands::train(cli, a),
        Command::Eval(a) => commands::eval(cli, a),
        Command::Baseline(a) => commands::baseline(cli, a),
        Command::Probe(a) => commands::probe(cli, a),
        Command::Report(a) => commands::report(cli, a),
    }
}
