use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use kaliko_core::training::{train, TrainConfig, TrainingError};
use kaliko_core::{DecoderVariant, KalikoModel, ModelConfig};

use crate::util::{ensure_out_dir, load_dataset, runtime, usage, write_run_config, CliError, CliResult};

/// Model hyperparameters as they appear in a config file. The raw state
/// dimension is not part of this — it always comes from the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub n_d: usize,
    pub ell: usize,
    pub c: usize,
    pub hidden: usize,
    pub decoder: DecoderVariant,
    pub fixed_prior: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let d = ModelConfig::defaults(1);
        ModelSpec {
            n_d: d.n_d,
            ell: d.ell,
            c: d.c,
            hidden: d.hidden,
            decoder: d.decoder,
            fixed_prior: d.fixed_prior,
        }
    }
}

impl ModelSpec {
    pub fn with_dim(&self, n: usize) -> ModelConfig {
        ModelConfig {
            n,
            n_d: self.n_d,
            ell: self.ell,
            c: self.c,
            hidden: self.hidden,
            decoder: self.decoder,
            fixed_prior: self.fixed_prior,
        }
    }
}

/// The training config file: `{"model": {...}, "train": {...}, "seed": K}`.
/// Every field is optional, unknown keys are rejected. `seed` initializes
/// the parameters; `train.seed` drives the batch schedule.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFileConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub seed: u64,
}

pub fn load_train_config(path: &Path) -> CliResult<TrainFileConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn map_training(e: TrainingError) -> CliError {
    match e {
        TrainingError::NonFinite { .. } => CliError::Training(e.to_string()),
        TrainingError::DataTooShort { .. } => usage(e),
        other => runtime(other),
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from an existing checkpoint; its architecture wins over the
    /// config file's `model` section, and `train.steps` more steps run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

pub fn run(args: TrainArgs) -> CliResult {
    let cfg = load_train_config(&args.config)?;
    let dataset = load_dataset(&args.data)?;
    let n = dataset
        .trajectories
        .first()
        .map(|t| t.states.cols())
        .ok_or_else(|| usage("dataset has no trajectories"))?;

    let mut model = match &args.resume {
        Some(path) => {
            let m = KalikoModel::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            if m.config.n != n {
                return Err(usage(format!(
                    "checkpoint expects {}-dimensional states, dataset has {n}",
                    m.config.n
                )));
            }
            m
        }
        None => KalikoModel::new(cfg.model.with_dim(n), cfg.seed),
    };

    let report = train(&mut model, &dataset, &cfg.train).map_err(map_training)?;

    ensure_out_dir(&args.out)?;
    model.save(&args.out.join("checkpoint.klko")).map_err(runtime)?;
    report
        .write_csv(&args.out.join("train_report.csv"))
        .map_err(|e| runtime(format!("train_report.csv: {e}")))?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        data: &'a Path,
        out: &'a Path,
        #[serde(skip_serializing_if = "Option::is_none")]
        resume: Option<&'a PathBuf>,
        config: &'a TrainFileConfig,
        completed_steps: u64,
    }
    write_run_config(
        &args.out,
        "train",
        &Resolved {
            data: &args.data,
            out: &args.out,
            resume: args.resume.as_ref(),
            config: &cfg,
            completed_steps: model.step,
        },
    )
}
