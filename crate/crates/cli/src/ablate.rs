use std::fs;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;

use kaliko_core::inference::{self, InferenceError};
use kaliko_core::systems::{sample_dataset, Dataset, SampleConfig};
use kaliko_core::training::train;
use kaliko_core::{DecoderVariant, KalikoModel, ModelConfig};

use crate::train::{load_train_config, map_training, TrainFileConfig};
use crate::util::{
    ensure_out_dir, load_dataset, rows_slice, runtime, usage, write_run_config, CliResult,
    ErrorAccum,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    /// Delay-stack depth: one block, the default four, and six.
    Delay,
    /// Convolutional decoder against the plain MLP.
    Decoder,
    /// Learned initial-state prior against one frozen at N(0, I).
    Prior,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Base train config JSON; the suite varies one axis on top of it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    t_in: usize,
    #[arg(long, default_value_t = 64)]
    t_out: usize,
}

/// Trains every variant of the chosen suite under one seed and budget, then
/// scores each on a fresh evaluation set drawn from the same system.
pub fn run(args: AblateArgs) -> CliResult {
    if args.t_out == 0 {
        return Err(usage("--t-out must be positive; the comparison scores predictions"));
    }
    let base = match &args.config {
        Some(path) => load_train_config(path)?,
        None => TrainFileConfig::default(),
    };
    let dataset = load_dataset(&args.data)?;
    let n = dataset
        .trajectories
        .first()
        .map(|t| t.states.cols())
        .ok_or_else(|| usage("dataset has no trajectories"))?;

    let variants: Vec<(&'static str, ModelConfig)> = match args.suite {
        Suite::Delay => [1usize, 4, 6]
            .iter()
            .map(|&n_d| {
                let name: &'static str = match n_d {
                    1 => "nd1",
                    4 => "nd4",
                    _ => "nd6",
                };
                let mut mc = base.model.with_dim(n);
                mc.n_d = n_d;
                (name, mc)
            })
            .collect(),
        Suite::Decoder => [("conv", DecoderVariant::Conv), ("mlp", DecoderVariant::Mlp)]
            .iter()
            .map(|&(name, decoder)| {
                let mut mc = base.model.with_dim(n);
                mc.decoder = decoder;
                (name, mc)
            })
            .collect(),
        Suite::Prior => [("learned", false), ("fixed", true)]
            .iter()
            .map(|&(name, fixed)| {
                let mut mc = base.model.with_dim(n);
                mc.fixed_prior = fixed;
                (name, mc)
            })
            .collect(),
    };

    let eval = eval_dataset(&dataset, args.t_in + args.t_out)?;
    ensure_out_dir(&args.out)?;

    let suite_name = match args.suite {
        Suite::Delay => "delay",
        Suite::Decoder => "decoder",
        Suite::Prior => "prior",
    };
    let mut table = String::from("suite,variant,seed,steps,mse,mae\n");
    for (name, mc) in variants {
        let mut model = KalikoModel::new(mc, base.seed);
        train(&mut model, &dataset, &base.train).map_err(map_training)?;
        model
            .save(&args.out.join(format!("ckpt_{name}.klko")))
            .map_err(runtime)?;
        let (mse, mae) = score(&model, &eval, args.t_in, args.t_out)?;
        table.push_str(&format!(
            "{suite_name},{name},{},{},{mse:.16e},{mae:.16e}\n",
            base.seed, model.step
        ));
    }
    fs::write(args.out.join("comparison.csv"), table)
        .map_err(|e| runtime(format!("comparison.csv: {e}")))?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        args: &'a AblateArgs,
        config: &'a TrainFileConfig,
    }
    write_run_config(&args.out, "ablate", &Resolved { args: &args, config: &base })
}

/// Held-out trajectories from the training dataset's own system and step
/// size, long enough for the prediction protocol.
fn eval_dataset(train_data: &Dataset, min_rows: usize) -> CliResult<Dataset> {
    let cfg = SampleConfig {
        system: train_data.config.system,
        n_traj: 8,
        steps: min_rows.max(train_data.config.steps),
        dt: train_data.config.dt,
        seed: train_data.config.seed + 1000,
        init: train_data.config.init.clone(),
    };
    sample_dataset(&cfg).map_err(runtime)
}

fn score(model: &KalikoModel, eval: &Dataset, t_in: usize, t_out: usize) -> CliResult<(f64, f64)> {
    let mut acc = ErrorAccum::default();
    for traj in &eval.trajectories {
        let context = rows_slice(&traj.states, 0, t_in);
        let output = inference::predict(model, &context, t_out).map_err(|e| match e {
            InferenceError::ContextTooShort { .. } => usage(e),
            other => runtime(other),
        })?;
        let truth = rows_slice(&traj.states, t_in, t_in + t_out);
        acc.push(&model.norm.normalize(&output.predicted), &model.norm.normalize(&truth));
    }
    Ok((acc.mse().unwrap_or(f64::NAN), acc.mae().unwrap_or(f64::NAN)))
}
