use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Bottleneck feature augmentation for domain-generalized segmentation.
#[derive(Parser, Debug)]
#[command(name = "sdfa", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-domain dataset on disk.
    Gen(GenArgs),
    /// Train one leave-one-domain-out fold.
    Train(TrainArgs),
    /// Train and evaluate every leave-one-domain-out fold.
    Lodo(RunArgs),
    /// Repeat the leave-one-domain-out run for several lambda values.
    Sweep(SweepArgs),
    /// Channel-count curves and feature difference heat maps.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// JSON list of synthetic domain specs.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Image/mask pairs per domain.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Offsets every seed in the spec.
    #[arg(long, env = "SDFA_SEED")]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
struct Overrides {
    /// JSON experiment config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "SDFA_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    /// Random Bernoulli(0.5) channel selection instead of the learned selector.
    #[arg(long)]
    no_sds: bool,
    /// Standard normal intensities instead of the learned shift and scale.
    #[arg(long)]
    no_sis: bool,
    /// Drop the selective consistency term.
    #[arg(long)]
    no_scl: bool,
    /// Enable image-space augmentations.
    #[arg(long)]
    image_aug: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Dataset directory, or a JSON synthetic dataset spec generated in memory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Held-out domain, by name or index.
    #[arg(long)]
    holdout: String,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma separated lambda values.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
    values: Vec<f64>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Step log of a run with the consistency term.
    #[arg(long)]
    scl_on: PathBuf,
    /// Step log of the matching run without it.
    #[arg(long)]
    scl_off: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint for difference heat maps (needs --data).
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of samples to draw heat maps for.
    #[arg(long, default_value_t = 4)]
    samples: usize,
    #[arg(long, env = "SDFA_SEED")]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Lodo(a) => commands::lodo(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Plot(a) => commands::plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
