use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ewod_core::simulator::Mode;

#[derive(Debug, Parser)]
#[command(name = "ewod", version, about = "Evolving-world detection toolkit")]
pub struct Cli {
    /// Worker threads for inference and scoring.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build and validate a task schedule from class names.
    Protocol {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every task of a schedule on the synthetic world.
    Run(RunArgs),
    /// Fold a task adapter into an aggregate adapter.
    Merge(MergeArgs),
    /// Score predictions and write a FOGS report.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Default, Clone)]
pub struct PolicyOverrides {
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub beta_min: Option<f64>,
    #[arg(long)]
    pub beta_max: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub schedule: PathBuf,
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[command(flatten)]
    pub policy: PolicyOverrides,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Container whose aggregate adapters and task counters are used.
    #[arg(long)]
    pub agg: PathBuf,
    /// Container whose task adapters are folded in.
    #[arg(long)]
    pub task: PathBuf,
    /// Training samples of the task being merged.
    #[arg(long)]
    pub n_curr: u64,
    /// Overrides the cumulative sample count stored in the aggregate file.
    #[arg(long)]
    pub n_prev: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub policy: PolicyOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// Ground truth per task, in task order.
    #[arg(long)]
    pub gt: Vec<PathBuf>,
    /// Predictions per task, in task order.
    #[arg(long)]
    pub pred: Vec<PathBuf>,
    /// Pre-computed per-task results (JSON list) instead of gt/pred files.
    #[arg(long, conflicts_with_all = ["gt", "pred", "schedule"])]
    pub results: Option<PathBuf>,
    /// Evaluation thresholds JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Flip every analytic gradient; the check must then fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
