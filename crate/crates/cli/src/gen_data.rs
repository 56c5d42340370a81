use std::path::PathBuf;

use clap::Args;

use kaliko_core::systems::{sample_dataset, write_dataset, OdeSystem, SampleConfig, SystemsError};

use crate::util::{runtime, usage, write_run_config, CliResult};

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// One of: vdp, pendulum, duffing, hopf.
    #[arg(long)]
    system: String,
    /// Damping coefficient for the Duffing system; ignored elsewhere.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    n_traj: usize,
    /// Integration steps per trajectory; each file gets steps + 1 rows.
    #[arg(long, default_value_t = 400)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    dt: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn run(args: GenDataArgs) -> CliResult {
    let system = OdeSystem::parse(&args.system, args.delta).map_err(usage)?;
    let config = SampleConfig {
        system,
        n_traj: args.n_traj,
        steps: args.steps,
        dt: args.dt,
        seed: args.seed,
        init: system.default_init(),
    };
    let dataset = sample_dataset(&config).map_err(map_sample)?;
    write_dataset(&dataset, &args.out).map_err(runtime)?;
    write_run_config(&args.out, "gen-data", &config)
}

fn map_sample(e: SystemsError) -> crate::util::CliError {
    match e {
        SystemsError::Diverged { .. } | SystemsError::RetriesExhausted { .. } => runtime(e),
        other => usage(other),
    }
}
