//! `phtail`: data generation, training, sampling, evaluation, direct
//! phase-type fitting, and ablation runs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input.

mod commands;
mod config;
mod error;
mod opts;
mod output;
mod pipeline;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "phtail", version, about = "Phase-type VAE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset
    Gen(commands::GenArgs),
    /// Train a VAE (ph, gaussian, or independent-ph decoder)
    Train(Box<commands::TrainCmd>),
    /// Draw samples from a trained checkpoint
    Sample(commands::SampleArgs),
    /// Compare generated tables with data or an analytic truth
    Eval(commands::EvalArgs),
    /// Fit a single canonical phase-type distribution by maximum likelihood
    FitPh(commands::FitArgs),
    /// Train and evaluate over a grid of (phases, beta)
    Ablate(Box<commands::AblateArgs>),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Eval(a) => commands::eval(a),
        Command::FitPh(a) => commands::fit_ph(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
