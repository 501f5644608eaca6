//! `diffaug`: spectrogram data augmentation with a conditional diffusion
//! model, fast ODE sampling, and top-k selection filtering.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "diffaug",
    version,
    about = "Diffusion-based spectrogram augmentation pipeline",
    propagate_version = true
)]
struct Cli {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a WAV manifest into SGRM spectrogram files.
    Featurize(commands::FeaturizeArgs),
    /// Apply the stochastic waveform augmentation policy over a manifest.
    Augment(commands::AugmentArgs),
    /// Train the conditional denoiser on SGRM spectrograms.
    TrainDpm(commands::TrainDpmArgs),
    /// Generate spectrograms from a trained denoiser checkpoint.
    Sample(commands::SampleArgs),
    /// Keep generated samples whose label ranks in the classifier's top k.
    Filter(commands::FilterArgs),
    /// Train the selection classifier on SGRM spectrograms.
    TrainClf(commands::TrainClfArgs),
    /// K-fold accuracy comparison of real vs augmented training sets.
    Evaluate(commands::EvaluateArgs),
    /// Wasserstein-vs-steps study of the samplers on a scalar oracle.
    BenchSolver(commands::BenchSolverArgs),
    /// Export an SGRM spectrogram as a portable graymap image.
    ExportPgm(commands::ExportPgmArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Featurize(args) => commands::featurize(cli.config.as_deref(), args),
        Command::Augment(args) => commands::augment(cli.config.as_deref(), args),
        Command::TrainDpm(args) => commands::train_dpm(cli.config.as_deref(), args),
        Command::Sample(args) => commands::sample(cli.config.as_deref(), args),
        Command::Filter(args) => commands::filter(cli.config.as_deref(), args),
        Command::TrainClf(args) => commands::train_clf(cli.config.as_deref(), args),
        Command::Evaluate(args) => commands::evaluate(cli.config.as_deref(), args),
        Command::BenchSolver(args) => commands::bench_solver(cli.config.as_deref(), args),
        Command::ExportPgm(args) => commands::export_pgm(cli.config.as_deref(), args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<config::UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
