//! `cpgan` command line: train/eval the cut-and-paste GAN, batch pseudo-label
//! images, composite by hand, generate synthetic datasets, and plot metrics.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
//! failure. All errors go to stderr with a stable `error-code:` prefix.

mod ops;
mod plot;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "cpgan",
    version,
    about = "Cut-and-paste GAN for unsupervised foreground segmentation",
    max_term_width = 100
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config file
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and emit a JSON report
    Eval(EvalArgs),
    /// Batch graph-cut pseudo-labels for a folder of images
    Pseudolabel(PseudolabelArgs),
    /// Blend a foreground onto a background through a mask
    Composite(CompositeArgs),
    /// Generate a synthetic shapes dataset with ground-truth masks
    SynthData(SynthDataArgs),
    /// Render loss/FID curves and the lambda strip from a metrics CSV
    Plot(PlotArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file (see README for the schema)
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory holding run folders
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override total training steps
    #[arg(long)]
    steps: Option<u64>,
    /// Override the run name
    #[arg(long)]
    run_name: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint archive (.ckpt)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset spec: synthetic://<seed>/<size> or a folder root
    #[arg(long)]
    data: String,
    /// Feature-extractor seed (proxy-FID)
    #[arg(long, default_value_t = 90210)]
    seed: u64,
    /// Write the JSON report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PseudolabelArgs {
    /// Folder of input images (png/jpg)
    #[arg(long = "in")]
    input: PathBuf,
    /// Folder to write 8-bit 0/255 mask PNGs into
    #[arg(long)]
    out: PathBuf,
    /// Segmenter seed
    #[arg(long, default_value_t = cpgan_core::trainer::PSEUDO_LABEL_SEED)]
    seed: u64,
}

#[derive(Args)]
struct CompositeArgs {
    /// Foreground image
    #[arg(long)]
    fg: PathBuf,
    /// Background image (same size as the foreground)
    #[arg(long)]
    bg: PathBuf,
    /// Gray mask image (same size; 255 = keep foreground)
    #[arg(long)]
    mask: PathBuf,
    /// Output PNG
    #[arg(long)]
    out: PathBuf,
    /// Unused; accepted for interface uniformity
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthDataArgs {
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of samples
    #[arg(long)]
    count: usize,
    /// Output root; foreground/, background/ and masks/ are created inside
    #[arg(long)]
    out: PathBuf,
    /// Image resolution (32, 48, 64, 128 or 256)
    #[arg(long, default_value_t = 64)]
    resolution: usize,
}

#[derive(Args)]
struct PlotArgs {
    /// metrics.csv produced by `train`
    #[arg(long)]
    metrics: PathBuf,
    /// Output PNG
    #[arg(long)]
    out: PathBuf,
    /// Unused; accepted for interface uniformity
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, not usage errors
            if e.use_stderr() {
                eprintln!("error-code: 1: {}", e);
                return ExitCode::from(1);
            }
            print!("{}", e);
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.cmd {
        Command::Train(a) => ops::train(a),
        Command::Eval(a) => ops::eval(a),
        Command::Pseudolabel(a) => ops::pseudolabel(a),
        Command::Composite(a) => ops::composite(a),
        Command::SynthData(a) => ops::synth_data(a),
        Command::Plot(a) => ops::plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error-code: {}: {}", code, e);
            ExitCode::from(code as u8)
        }
    }
}
