//! `kaliko` — sample dynamical-systems data, train the linear-latent model,
//! predict forward, and analyze the learned spectrum. Every command is
//! deterministic given its flags and seeds, and leaves the resolved
//! configuration next to its outputs.

mod ablate;
mod analyze;
mod baseline;
mod gen_data;
mod predict;
mod train;
mod util;

use clap::{Parser, Subcommand};

use util::{runtime, usage, CliResult};

#[derive(Parser)]
#[command(name = "kaliko", version, about = "Globally linear latent dynamics: data, training, prediction, spectra")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a trajectory dataset from one of the built-in systems.
    GenData(gen_data::GenDataArgs),
    /// Train a model on a dataset, or resume from a checkpoint.
    Train(train::TrainArgs),
    /// Filter a context from each trajectory and predict ahead.
    Predict(predict::PredictArgs),
    /// Spectra, eigenfunction fields, cycle traces, modes, error maps.
    Analyze(analyze::AnalyzeArgs),
    /// Delay-embedded DMD under the same protocol as `predict`.
    BaselineDmd(baseline::BaselineArgs),
    /// Train variants along one axis and compare their prediction errors.
    Ablate(ablate::AblateArgs),
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData(args) => gen_data::run(args),
        Command::Train(args) => train::run(args),
        Command::Predict(args) => predict::run(args),
        Command::Analyze(args) => analyze::run(args),
        Command::BaselineDmd(args) => baseline::run(args),
        Command::Ablate(args) => ablate::run(args),
    }
}

/// `KALIKO_THREADS` caps the worker pool; unset means all cores.
fn init_threads() -> CliResult {
    match std::env::var("KALIKO_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(e) => Err(usage(format!("KALIKO_THREADS: {e}"))),
        Ok(text) => {
            let count: usize = text
                .trim()
                .parse()
                .ok()
                .filter(|&k| k > 0)
                .ok_or_else(|| {
                    usage(format!("KALIKO_THREADS must be a positive integer, got `{text}`"))
                })?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(count)
                .build_global()
                .map_err(runtime)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = init_threads().and_then(|()| run(cli)) {
        eprintln!("kaliko: {e}");
        std::process::exit(e.code());
    }
}
