use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use kaliko_core::inference::{self, InferenceError};
use kaliko_core::KalikoModel;

use crate::util::{
    ensure_out_dir, load_dataset, rows_slice, runtime, usage, write_run_config, CliError,
    CliResult, PredictionWriter,
};

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Context rows filtered before prediction starts.
    #[arg(long, default_value_t = 128)]
    t_in: usize,
    /// Rows predicted past the context.
    #[arg(long, default_value_t = 64)]
    t_out: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also report raw-unit metrics next to the normalized ones.
    #[arg(long)]
    raw_units: bool,
}

pub fn run(args: PredictArgs) -> CliResult {
    let model =
        KalikoModel::load(&args.ckpt).map_err(|e| usage(format!("{}: {e}", args.ckpt.display())))?;
    let dataset = load_dataset(&args.data)?;
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
        PredictionWriter::new(&args.out, &model.norm, args.t_in, args.t_out, args.raw_units);
    for traj in &dataset.trajectories {
        let context = rows_slice(&traj.states, 0, args.t_in);
        let output = inference::predict(&model, &context, args.t_out).map_err(map_inference)?;
        let truth = rows_slice(&traj.states, args.t_in, needed);
        writer.push(&truth, &output.predicted)?;
    }
    writer.finish()?;
    write_run_config(&args.out, "predict", &args)
}

fn map_inference(e: InferenceError) -> CliError {
    match e {
        InferenceError::ContextTooShort { .. } => usage(e),
        other => runtime(other),
    }
}
