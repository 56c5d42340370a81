use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use kaliko_core::baselines::{dmd_fit, BaselineError, DEFAULT_RIDGE};

use crate::util::{
    ensure_out_dir, load_dataset, rows_slice, runtime, usage, write_run_config, CliError,
    CliResult, PredictionWriter,
};

#[derive(Debug, Args, Serialize)]
pub struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 128)]
    t_in: usize,
    #[arg(long, default_value_t = 64)]
    t_out: usize,
    /// Rows stacked per delay vector.
    #[arg(long, default_value_t = 16)]
    delay: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also report raw-unit metrics next to the normalized ones.
    #[arg(long)]
    raw_units: bool,
}

/// Per-trajectory delay-embedded DMD under the same protocol as `predict`:
/// fit on the context rows alone, then roll the linear operator forward.
pub fn run(args: BaselineArgs) -> CliResult {
    let dataset = load_dataset(&args.data)?;
    if args.delay + 2 > args.t_in {
        return Err(usage(format!(
            "--delay {} needs at least {} context rows, --t-in is {}",
            args.delay,
            args.delay + 2,
            args.t_in
        )));
    }
    let needed = args.t_in + args.t_out;
    for (i, traj) in dataset.trajectories.iter().enumerate() {
        if traj.states.rows() < needed {
            return Err(usage(format!(
                "trajectory {i} has {} rows; --t-in {} + --t-out {} needs {needed}",
                traj.states.rows(),
                args.t_in,
                args.t_out
            )));
        }
    }

    ensure_out_dir(&args.out)?;
    let mut writer =
        PredictionWriter::new(&args.out, &dataset.norm, args.t_in, args.t_out, args.raw_units);
    for traj in &dataset.trajectories {
        let context = rows_slice(&traj.states, 0, args.t_in);
        let model = dmd_fit(&[&context], args.delay, DEFAULT_RIDGE).map_err(map_baseline)?;
        let pred = model.predict(&context, args.t_out);
        let truth = rows_slice(&traj.states, args.t_in, needed);
        writer.push(&truth, &pred)?;
    }
    writer.finish()?;
    write_run_config(&args.out, "baseline-dmd", &args)
}

fn map_baseline(e: BaselineError) -> CliError {
    match e {
        BaselineError::DataTooShort { .. } => usage(e),
        BaselineError::Linalg(_) => runtime(e),
    }
}
