//! `mssnet` command-line tool: dataset generation, training, evaluation,
//! prediction and ablation runs.
//!
//! Settings resolve as defaults < `--config` file < flags. Every command
//! writes a `manifest.txt` into its output directory holding the resolved
//! settings; passing it back through `--config` replays the run.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mssnet", version, about = "Multi-scale supervised pose estimation on synthetic stick figures")]
pub struct Cli {
    /// key=value config file (dotted sections: net., train., data., eval., ablate., input.)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset (train/ and test/ splits).
    GenData(GenDataArgs),
    /// Train a network.
    Train(TrainArgs),
    /// Evaluate a checkpoint with PCK.
    Eval(EvalArgs),
    /// Predict keypoints for one image.
    Predict(PredictArgs),
    /// Train and evaluate a stacks x scales grid.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total number of samples.
    #[arg(long)]
    pub count: Option<usize>,
    /// Number of samples held out as test/.
    #[arg(long)]
    pub test_count: Option<usize>,
    /// Generate a single unsplit occlusion slice (one occluded elbow or knee per figure).
    #[arg(long)]
    pub occlusion_slice: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct NetFlags {
    #[arg(long)]
    pub stacks: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Comma list of supervision divisors, e.g. 1,2,4.
    #[arg(long)]
    pub scales: Option<String>,
    /// Disable the regression stage.
    #[arg(long)]
    pub no_regression: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub net: NetFlags,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PckFlags {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_parser = ["head", "torso"])]
    pub norm: Option<String>,
    #[arg(long, value_parser = ["all", "occluded"])]
    pub subset: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub pck: PckFlags,
    /// Decode the last stack's base heatmaps instead of the regression output.
    #[arg(long)]
    pub pre_regression: bool,
    /// Write per-sample heatmap dumps.
    #[arg(long)]
    pub dump_heatmaps: bool,
    /// Write per-sample pose-overlay images.
    #[arg(long)]
    pub overlays: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Image as a tensor file (.msst) or binary PPM (.ppm).
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma list of stack counts, e.g. 1,2,4.
    #[arg(long)]
    pub stacks: Option<String>,
    /// Semicolon-separated scale sets, e.g. "1;1,2;1,2,4".
    #[arg(long)]
    pub scales: Option<String>,
    /// Comma list of seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Epochs per cell.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Also train every cell without the regression stage.
    #[arg(long)]
    pub with_no_regression: bool,
    #[arg(long)]
    pub no_regression: bool,
    #[command(flatten)]
    pub pck: PckFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", commands::one_line(&e));
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
