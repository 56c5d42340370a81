use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use kaliko_core::systems::{self, Dataset, NormStats};
use kaliko_core::Tensor;

/// Every failure maps onto one of four exit codes: 2 for bad inputs, 3 for
/// numeric/data trouble at runtime, 4 for a training abort, 5 for analysis
/// requests the spectrum cannot answer.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
    Training(String),
    Analysis(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Training(_) => 4,
            CliError::Analysis(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m)
            | CliError::Runtime(m)
            | CliError::Training(m)
            | CliError::Analysis(m) => f.write_str(m),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Dataset loading problems are input problems.
pub fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    systems::load_dataset(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))
}

pub fn ensure_out_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

/// The resolved configuration every command leaves next to its outputs.
pub fn write_run_config(out: &Path, command: &'static str, resolved: &impl Serialize) -> CliResult {
    #[derive(Serialize)]
    struct RunConfig<'a, T: Serialize> {
        command: &'static str,
        #[serde(flatten)]
        resolved: &'a T,
    }
    let text = serde_json::to_string_pretty(&RunConfig { command, resolved }).map_err(runtime)?;
    fs::write(out.join("run_config.json"), text + "\n")
        .map_err(|e| runtime(format!("run_config.json: {e}")))
}

/// Copy of rows [a, b) as a fresh tensor.
pub fn rows_slice(t: &Tensor, a: usize, b: usize) -> Tensor {
    let n = t.cols();
    let mut data = Vec::with_capacity((b - a) * n);
    for r in a..b {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(&[b - a, n], data)
}

/// Streaming elementwise error sums, so metrics aggregate over trajectories
/// of any length without a second pass.
#[derive(Debug, Default, Clone, Copy)]
pub struct ErrorAccum {
    se: f64,
    ae: f64,
    count: usize,
}

impl ErrorAccum {
    pub fn push(&mut self, pred: &Tensor, truth: &Tensor) {
        assert_eq!(pred.shape(), truth.shape());
        for (a, b) in pred.data().iter().zip(truth.data()) {
            let d = a - b;
            self.se += d * d;
            self.ae += d.abs();
        }
        self.count += pred.len();
    }

    pub fn mse(&self) -> Option<f64> {
        (self.count > 0).then(|| self.se / self.count as f64)
    }

    pub fn mae(&self) -> Option<f64> {
        (self.count > 0).then(|| self.ae / self.count as f64)
    }
}

/// Aggregate metrics for a prediction run. Normalized numbers are the
/// cross-system comparables; raw-unit ones appear only on request. All
/// metric fields vanish from the JSON when the horizon is zero.
#[derive(Debug, Serialize)]
pub struct Summary {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_mae: Option<f64>,
    pub t_in: usize,
    pub t_out: usize,
}

pub fn write_summary(out: &Path, summary: &Summary) -> CliResult {
    let text = serde_json::to_string_pretty(summary).map_err(runtime)?;
    fs::write(out.join("summary.json"), text + "\n")
        .map_err(|e| runtime(format!("summary.json: {e}")))
}

/// One `t,dim,truth,pred` row per horizon step and state dimension; `t` is
/// the absolute row index in the source trajectory and `dim` is 1-based to
/// match the dataset's `x1..xn` headers.
pub fn write_prediction_csv(
    path: &Path,
    t_in: usize,
    truth: &Tensor,
    pred: &Tensor,
) -> CliResult {
    let mut out = String::from("t,dim,truth,pred\n");
    for k in 0..pred.rows() {
        for d in 0..pred.cols() {
            out.push_str(&format!(
                "{},{},{:.16e},{:.16e}\n",
                t_in + k,
                d + 1,
                truth.get2(k, d),
                pred.get2(k, d)
            ));
        }
    }
    fs::write(path, out).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Shared tail of `predict` and `baseline-dmd`: write one CSV per trajectory,
/// fold every entry into normalized (and optionally raw) accumulators, and
/// drop the summary next to them.
pub struct PredictionWriter<'a> {
    out: &'a Path,
    norm: &'a NormStats,
    t_in: usize,
    t_out: usize,
    raw_units: bool,
    normalized: ErrorAccum,
    raw: ErrorAccum,
    index: usize,
}

impl<'a> PredictionWriter<'a> {
    pub fn new(
        out: &'a Path,
        norm: &'a NormStats,
        t_in: usize,
        t_out: usize,
        raw_units: bool,
    ) -> Self {
        PredictionWriter {
            out,
            norm,
            t_in,
            t_out,
            raw_units,
            normalized: ErrorAccum::default(),
            raw: ErrorAccum::default(),
            index: 0,
        }
    }

    pub fn push(&mut self, truth: &Tensor, pred: &Tensor) -> CliResult {
        let name = format!("pred_{:04}.csv", self.index);
        self.index += 1;
        write_prediction_csv(&self.out.join(name), self.t_in, truth, pred)?;
        self.normalized.push(&self.norm.normalize(pred), &self.norm.normalize(truth));
        self.raw.push(pred, truth);
        Ok(())
    }

    pub fn finish(self) -> CliResult {
        let summary = Summary {
            mse: self.normalized.mse(),
            mae: self.normalized.mae(),
            raw_mse: self.raw_units.then(|| self.raw.mse()).flatten(),
            raw_mae: self.raw_units.then(|| self.raw.mae()).flatten(),
            t_in: self.t_in,
            t_out: self.t_out,
        };
        write_summary(self.out, &summary)
    }
}

pub fn create_file(path: &Path) -> CliResult<impl Write> {
    fs::File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}
