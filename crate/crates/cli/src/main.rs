mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rodiff_core::dataset::Split;
use rodiff_core::Error;

/// Soft-rod whipping simulator and goal-conditioned trajectory diffusion.
#[derive(Debug, Parser)]
#[command(name = "rodiff", version)]
pub struct Cli {
    /// Run seed; overrides the seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML file with optional [model], [train] and [adapt] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one control and report the tip motion.
    Simulate(SimulateArgs),
    /// Simulate a dataset of sampled controls.
    GenDataset(GenDatasetArgs),
    /// Train a denoiser on a dataset.
    Train(TrainArgs),
    /// Sample a trajectory for one goal.
    Sample(SampleArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Render a report, loss log or sampling diagnostics as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Joint 1 waypoints (rad), four comma-separated values.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, requires = "theta2")]
    pub theta1: Option<Vec<f64>>,
    /// Joint 2 waypoints (rad), four comma-separated values.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, requires = "theta1")]
    pub theta2: Option<Vec<f64>>,
    /// Binary record output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// SVG of the tip path.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.iterations`.
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Goal position x,y,z (m).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
    pub goal: Vec<f64>,
    /// none, sample_grad, proj_finetune or full_finetune; overrides `adapt.mode`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Model description; defaults to the config's [model] or the built-in rod.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Token trajectory CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-step guidance diagnostics CSV.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    /// Simulate the sample and report the closest approach.
    #[arg(long)]
    pub rollout: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Overrides `adapt.mode`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Evaluate only the first N goals.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Report CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Eval report, training loss log or sampling diagnostics CSV.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Histogram bins for reports.
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
