//! The `advart` command line. The binary is a thin wrapper around [`run`].

mod adapter;
mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "advart", version, about = "Craft artwork-like adversarial patches against a grid person detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic annotated dataset (PNGs plus manifest.jsonl).
    SynthData(SynthArgs),
    /// Train the toy grid detector and write an ADVART-DET v1 checkpoint.
    TrainDetector(TrainArgs),
    /// Craft a patch; writes patch.png, patch.bin and history.csv.
    Craft(CraftArgs),
    /// mAP, ASR and SSIM of a patch against clean detections.
    Eval(EvalArgs),
    /// One crafting run and evaluation per cell of an ablation grid.
    Sweep(SweepArgs),
    /// Structural similarity of two images of equal size.
    Ssim(SsimArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Scene side in pixels.
    #[arg(long, default_value_t = 160)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Scene manifest (JSON lines).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training-curve CSV; defaults to the checkpoint path with a .curve.csv extension.
    #[arg(long)]
    curve: Option<PathBuf>,
}

/// Flags shared by `craft` and `sweep`; each overrides the config key of the same name.
#[derive(Debug, Args)]
struct RunOverrides {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path, "toy", or cmd:<program>.
    #[arg(long)]
    detector: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Built-in artwork name or image path.
    #[arg(long)]
    artwork: Option<String>,
    /// "target" or "random".
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// mse or cosine.
    #[arg(long)]
    sim_metric: Option<String>,
    /// Training-time transformations, e.g. "all", "none", "scale+rotation".
    #[arg(long)]
    eot: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CraftArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Continue from <out>/patch.bin and <out>/history.csv.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint path or cmd:<program>.
    #[arg(long)]
    detector: String,
    #[arg(long)]
    data: PathBuf,
    /// patch.bin snapshot or patch image; omitted means clean scenes.
    #[arg(long)]
    patch: Option<PathBuf>,
    #[arg(long, default_value_t = advart::optimize::CraftConfig::default().ratio)]
    ratio: f64,
    /// Artwork for the SSIM column.
    #[arg(long)]
    artwork: Option<String>,
    /// Eval-time transformations; identity placement when omitted.
    #[arg(long)]
    eval_eot: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scenes to evaluate: all, train or val.
    #[arg(long, default_value = "all")]
    split: String,
    /// Report CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Grid axes as key=v1,v2 (keys: ratio, metric, beta, eot, artwork);
    /// repeat the flag or separate axes with ';'.
    #[arg(long)]
    grid: Vec<String>,
    /// Eval-time transformations applied to every cell.
    #[arg(long)]
    eval_eot: Option<String>,
}

#[derive(Debug, Args)]
struct SsimArgs {
    a: PathBuf,
    b: PathBuf,
}

/// Parses the process arguments and runs one subcommand.
pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            eprint!("advart: error: {}", text.strip_prefix("error: ").unwrap_or(&text));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::SynthData(a) => commands::synth_data(a),
        Command::TrainDetector(a) => commands::train_detector(a),
        Command::Craft(a) => commands::craft(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Ssim(a) => commands::ssim(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("advart: error: {e}");
            ExitCode::FAILURE
        }
    }
}
