mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use uconvert_core::Axis;

#[derive(Parser)]
#[command(name = "uconvert", version, about = "Paired MR modality conversion on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired phantom dataset with a manifest.
    GenData(GenDataArgs),
    /// Train one model on one view of a dataset's training split.
    Train(TrainArgs),
    /// Convert a source volume with one checkpoint or a three-view ensemble.
    Convert(ConvertArgs),
    /// Slice-wise PSNR and SSIM between a prediction and a target volume.
    Evaluate(EvaluateArgs),
    /// Parameter count and timings for one model on synthetic data.
    Benchmark(BenchmarkArgs),
}

fn is_false(b: &bool) -> bool {
    !*b
}

// Every value flag is optional so that an unset flag leaves the config
// file's value (or the default) in place.

#[derive(Args, Serialize)]
struct GenDataArgs {
    /// TOML file with any of the keys below.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Number of subjects (default 20).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    subjects: Option<usize>,
    /// Cube edge length in voxels (default 64).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    wm_intensity: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    gm_intensity: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    csf_intensity: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    bias_amplitude: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    deform_amplitude: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    blur_sigma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    contrast_alpha: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_sigma: Option<f64>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// uconvert, srgan or espcn (default uconvert).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    /// sagittal, coronal or axial (default sagittal).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    view: Option<Axis>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Weight of the adversarial term (srgan only).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    adversarial_weight: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    train_fraction: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    split_seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ConvertArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Checkpoint; the sagittal one with --multiview.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    ckpt_coronal: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    ckpt_axial: Option<PathBuf>,
    /// Source MVOL volume.
    #[arg(long = "in")]
    #[serde(rename = "in", skip_serializing_if = "Option::is_none")]
    input: Option<PathBuf>,
    /// Output MVOL volume.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Convert along all three views and average.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    multiview: bool,
    /// Also write each view's volume next to the fused output.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    keep_views: bool,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pred: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<PathBuf>,
    /// Slicing axis (default sagittal).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    axis: Option<Axis>,
    /// Write the full per-slice report here.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    json: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct BenchmarkArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    /// Phantom edge length (default 64).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    subjects: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Also write the JSON row here.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(config::resolve(a.config.as_deref(), &a)?),
        Command::Train(a) => {
            let cfg: config::TrainRunConfig = config::resolve(a.config.as_deref(), &a)?;
            if cfg.data.is_none() {
                let usage = Cli::command()
                    .find_subcommand_mut("train")
                    .expect("train subcommand")
                    .render_usage();
                anyhow::bail!("missing --data\n\n{usage}");
            }
            commands::train(cfg)
        }
        Command::Convert(a) => commands::convert(config::resolve(a.config.as_deref(), &a)?),
        Command::Evaluate(a) => commands::evaluate(config::resolve(a.config.as_deref(), &a)?),
        Command::Benchmark(a) => commands::benchmark(config::resolve(a.config.as_deref(), &a)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
