mod download;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{error, info};
use sparsetrain::controller::DEFAULT_R_MIN;
use sparsetrain::data::synthetic::{write_synthetic_cifar, SyntheticSpec};
use sparsetrain::experiment::run_experiment;
use sparsetrain::{ExperimentConfig, ModelSpec, StrategyKind};

#[derive(Parser)]
#[command(name = "sparsetrain", version, about = "Train wide ResNets under a shared top-k activation budget")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training experiment and write its metrics CSV.
    Train(TrainArgs),
    /// Write a synthetic corpus in the CIFAR-10 binary layout.
    SynthData(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "dense")]
    strategy: StrategyKind,
    #[arg(long, default_value_t = 28)]
    depth: usize,
    #[arg(long, default_value_t = 4)]
    widen: usize,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 3407)]
    seed: u64,
    /// Directory holding data_batch_1..5.bin and test_batch.bin.
    #[arg(long, default_value = "data/cifar-10-batches-bin")]
    data_dir: PathBuf,
    /// Metrics CSV destination.
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
    /// Where to save the best-test-accuracy weights.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Train on the first N training images.
    #[arg(long)]
    subset: Option<usize>,
    /// Evaluate on the first N test images.
    #[arg(long)]
    test_subset: Option<usize>,
    /// Also report test accuracy with every site dense.
    #[arg(long)]
    eval_dense: bool,
    #[arg(long, default_value_t = DEFAULT_R_MIN)]
    r_min: f64,
    /// Fetch CIFAR-10 into --data-dir if it is not already there.
    #[arg(long)]
    download: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3407)]
    seed: u64,
}

fn train(args: TrainArgs) -> Result<()> {
    if args.download {
        download::ensure_cifar10(&args.data_dir)?;
    }
    let config = ExperimentConfig {
        strategy: args.strategy,
        epochs: args.epochs,
        batch_size: args.batch_size,
        base_lr: args.lr,
        seed: args.seed,
        model: ModelSpec::wrn(args.depth, args.widen),
        data_dir: args.data_dir,
        metrics_path: args.out,
        checkpoint_path: args.checkpoint,
        subset: args.subset,
        test_subset: args.test_subset,
        eval_dense: args.eval_dense,
        r_min: args.r_min,
        ..ExperimentConfig::default()
    };
    let outcome = run_experiment::<f32>(&config).context("training aborted")?;
    info!(
        "best test accuracy {:.4} at epoch {}, final {:.4}, {} resets; metrics in {}",
        outcome.summary.best_test_accuracy,
        outcome.summary.best_epoch,
        outcome.summary.final_test_accuracy,
        outcome.resets,
        config.metrics_path.display()
    );
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec { seed: args.seed, ..SyntheticSpec::default() };
    write_synthetic_cifar(&args.out, &spec)?;
    info!("wrote synthetic corpus to {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => train(args),
        Command::SynthData(args) => synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
