use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;

use kaliko_core::analysis::{
    closed_orbit, closure_residual, eig, eigenfunction_field, koopman_mode_project,
    limit_cycle_trace, reconstruction_heatmap, write_field_csv, write_field_svg,
    write_spectrum_csv, AnalysisError, EigenPair, FieldQuantity, Grid, GridAxis,
};
use kaliko_core::systems::Dataset;
use kaliko_core::{KalikoModel, Tensor};

use crate::util::{
    create_file, ensure_out_dir, load_dataset, runtime, usage, write_run_config, CliError,
    CliResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyzeMode {
    /// Eigenvalue table of the learned transition matrix.
    Spectrum,
    /// One eigenfunction sampled over a state-space grid.
    Eigenfield,
    /// Eigenfunction trace around a closed orbit, with its winding number.
    Cycle,
    /// Spectral-mode displacement samples along a trajectory.
    Mode,
    /// Reconstruction error over a state-space grid.
    Heatmap,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    mode: AnalyzeMode,
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory. Required by every mode except `spectrum`, which
    /// only uses it for the optional closure diagnostic: the system, step
    /// size, and grid bounds all come from its manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Which eigenpair to analyze, by descending modulus.
    #[arg(long, default_value_t = 0)]
    eig_index: usize,
    /// Grid resolution per axis.
    #[arg(long, default_value_t = 100)]
    grid: usize,
    /// Integration steps behind each probe state (default: two windows).
    #[arg(long)]
    warmup: Option<usize>,
    /// Steps each heatmap cell is reconstructed over (default: four windows).
    #[arg(long)]
    horizon: Option<usize>,
    /// Trajectory index for `mode`.
    #[arg(long, default_value_t = 0)]
    traj: usize,
    /// Start state for the `cycle` orbit search, as `x1,x2`
    /// (default: the sampling region's upper corner).
    #[arg(long)]
    x0: Option<String>,
    /// Transient steps dropped before the orbit search.
    #[arg(long, default_value_t = 2000)]
    settle: usize,
    /// Step budget for the orbit search after the transient.
    #[arg(long, default_value_t = 8000)]
    max_steps: usize,
    /// Also write SVG heatmaps next to the CSVs.
    #[arg(long)]
    svg: bool,
    /// Fixed SVG color range, as `lo:hi` (default: the data's range).
    #[arg(long)]
    range: Option<String>,
}

pub fn run(args: AnalyzeArgs) -> CliResult {
    let model =
        KalikoModel::load(&args.ckpt).map_err(|e| usage(format!("{}: {e}", args.ckpt.display())))?;
    let pairs = eig(&model.transition_matrix()).map_err(runtime)?;
    ensure_out_dir(&args.out)?;

    match args.mode {
        AnalyzeMode::Spectrum => spectrum(&args, &model, &pairs)?,
        AnalyzeMode::Eigenfield => eigenfield(&args, &model, &pairs)?,
        AnalyzeMode::Cycle => cycle(&args, &model, &pairs)?,
        AnalyzeMode::Mode => mode_samples(&args, &model, &pairs)?,
        AnalyzeMode::Heatmap => heatmap(&args, &model)?,
    }
    write_run_config(&args.out, "analyze", &args)
}

fn spectrum(args: &AnalyzeArgs, model: &KalikoModel, pairs: &[EigenPair]) -> CliResult {
    let mut f = create_file(&args.out.join("spectrum.csv"))?;
    write_spectrum_csv(pairs, &mut f).map_err(runtime)?;

    // With a dataset at hand, also probe how linearly the operator advances
    // the implicit embedding across that data's initial states.
    if let Some(dir) = &args.data {
        let dataset = load_dataset(dir)?;
        let probes = initial_states(&dataset, 64);
        let diag = closure_residual(
            model,
            &dataset.config.system,
            dataset.config.dt,
            &probes,
            default_warmup(args, model),
        )
        .map_err(map_analysis)?;
        #[derive(Serialize)]
        struct Closure {
            median_residual: f64,
            median_latent_norm: f64,
        }
        let text = serde_json::to_string_pretty(&Closure {
            median_residual: diag.median_residual,
            median_latent_norm: diag.median_latent_norm,
        })
        .map_err(runtime)?;
        fs::write(args.out.join("closure.json"), text + "\n")
            .map_err(|e| runtime(format!("closure.json: {e}")))?;
    }
    Ok(())
}

fn eigenfield(args: &AnalyzeArgs, model: &KalikoModel, pairs: &[EigenPair]) -> CliResult {
    let dataset = require_data(args)?;
    let pair = select_pair(args, pairs)?;
    let field = eigenfunction_field(
        model,
        &dataset.config.system,
        dataset.config.dt,
        pair,
        data_grid(&dataset, args.grid),
        default_warmup(args, model),
    )
    .map_err(map_analysis)?;

    let mut f = create_file(&args.out.join("eigenfield.csv"))?;
    write_field_csv(&field, &mut f).map_err(runtime)?;
    if args.svg {
        let range = parse_range(args)?;
        let mut f = create_file(&args.out.join("eigenfield_abs.svg"))?;
        write_field_svg(&field, FieldQuantity::Abs, range, &mut f).map_err(runtime)?;
        let mut f = create_file(&args.out.join("eigenfield_arg.svg"))?;
        write_field_svg(&field, FieldQuantity::Arg, None, &mut f).map_err(runtime)?;
    }
    Ok(())
}

fn cycle(args: &AnalyzeArgs, model: &KalikoModel, pairs: &[EigenPair]) -> CliResult {
    let dataset = require_data(args)?;
    let pair = select_pair(args, pairs)?;
    let sys = dataset.config.system;
    let dt = dataset.config.dt;
    let x0 = match &args.x0 {
        Some(text) => parse_state(text)?,
        None => dataset.config.init.bounding_box().1,
    };
    let orbit = closed_orbit(&sys, dt, &x0, args.settle, args.max_steps).map_err(map_analysis)?;
    let trace = limit_cycle_trace(model, &sys, dt, pair, &orbit, default_warmup(args, model))
        .map_err(map_analysis)?;

    let mut f = create_file(&args.out.join("cycle.csv"))?;
    writeln!(f, "x1,x2,re,im,abs,arg").map_err(runtime)?;
    for (r, v) in trace.values.iter().enumerate() {
        let x = orbit.row(r);
        writeln!(
            f,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            x[0],
            x[1],
            v.re,
            v.im,
            v.norm(),
            v.arg()
        )
        .map_err(runtime)?;
    }

    #[derive(Serialize)]
    struct Winding {
        winding: i64,
        eig_index: usize,
        eigenvalue: Eigenvalue,
        modulus_cv: f64,
        orbit_steps: usize,
    }
    #[derive(Serialize)]
    struct Eigenvalue {
        re: f64,
        im: f64,
        abs: f64,
    }
    let text = serde_json::to_string_pretty(&Winding {
        winding: trace.winding,
        eig_index: args.eig_index,
        eigenvalue: Eigenvalue {
            re: pair.value.re,
            im: pair.value.im,
            abs: pair.value.norm(),
        },
        modulus_cv: trace.modulus_cv(),
        orbit_steps: orbit.rows(),
    })
    .map_err(runtime)?;
    fs::write(args.out.join("winding.json"), text + "\n")
        .map_err(|e| runtime(format!("winding.json: {e}")))
}

fn mode_samples(args: &AnalyzeArgs, model: &KalikoModel, pairs: &[EigenPair]) -> CliResult {
    let dataset = require_data(args)?;
    let pair = select_pair(args, pairs)?;
    let traj = dataset.trajectories.get(args.traj).ok_or_else(|| {
        usage(format!(
            "--traj {} out of range; dataset has {} trajectories",
            args.traj,
            dataset.trajectories.len()
        ))
    })?;
    let samples = koopman_mode_project(model, pair, &traj.states).map_err(map_analysis)?;

    let n = model.config.n;
    let mut f = create_file(&args.out.join("mode.csv"))?;
    let header: Vec<String> = (1..=n)
        .map(|i| format!("x{i}"))
        .chain((1..=n).map(|i| format!("d{i}")))
        .collect();
    writeln!(f, "{}", header.join(",")).map_err(runtime)?;
    for s in &samples {
        let row: Vec<String> = s
            .state
            .iter()
            .chain(&s.displacement)
            .map(|v| format!("{v:.16e}"))
            .collect();
        writeln!(f, "{}", row.join(",")).map_err(runtime)?;
    }
    Ok(())
}

fn heatmap(args: &AnalyzeArgs, model: &KalikoModel) -> CliResult {
    let dataset = require_data(args)?;
    let window = model.config.n_d * model.config.c;
    let horizon = args.horizon.unwrap_or(4 * window);
    let field = reconstruction_heatmap(
        model,
        &dataset.config.system,
        dataset.config.dt,
        data_grid(&dataset, args.grid),
        horizon,
    )
    .map_err(map_analysis)?;

    let mut f = create_file(&args.out.join("heatmap.csv"))?;
    write_field_csv(&field, &mut f).map_err(runtime)?;
    if args.svg {
        let mut f = create_file(&args.out.join("heatmap.svg"))?;
        write_field_svg(&field, FieldQuantity::Re, parse_range(args)?, &mut f).map_err(runtime)?;
    }
    Ok(())
}

fn require_data(args: &AnalyzeArgs) -> CliResult<Dataset> {
    let dir = args
        .data
        .as_ref()
        .ok_or_else(|| usage("this mode needs --data for the system, step size, and bounds"))?;
    load_dataset(dir)
}

fn select_pair<'a>(args: &AnalyzeArgs, pairs: &'a [EigenPair]) -> CliResult<&'a EigenPair> {
    pairs.get(args.eig_index).ok_or_else(|| {
        CliError::Analysis(format!(
            "--eig-index {} out of range; the spectrum has {} eigenpairs",
            args.eig_index,
            pairs.len()
        ))
    })
}

/// Two windows of history unless overridden: enough for the filter to settle.
fn default_warmup(args: &AnalyzeArgs, model: &KalikoModel) -> usize {
    args.warmup.unwrap_or(2 * model.config.n_d * model.config.c)
}

fn data_grid(dataset: &Dataset, count: usize) -> Grid {
    let (lo, hi) = dataset.config.init.bounding_box();
    Grid { x: GridAxis::new(lo[0], hi[0], count), y: GridAxis::new(lo[1], hi[1], count) }
}

/// One probe per trajectory start, capped.
fn initial_states(dataset: &Dataset, cap: usize) -> Tensor {
    let take = dataset.trajectories.len().min(cap);
    let n = dataset.trajectories[0].states.cols();
    let mut data = Vec::with_capacity(take * n);
    for traj in dataset.trajectories.iter().take(take) {
        data.extend_from_slice(traj.states.row(0));
    }
    Tensor::new(&[take, n], data)
}

fn parse_state(text: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<Vec<f64>, _>>()
        .map_err(|e| usage(format!("--x0 `{text}`: {e}")))
}

fn parse_range(args: &AnalyzeArgs) -> CliResult<Option<(f64, f64)>> {
    let Some(text) = &args.range else { return Ok(None) };
    let parts: Vec<&str> = text.split(':').collect();
    let parsed = if parts.len() == 2 {
        match (parts[0].trim().parse::<f64>(), parts[1].trim().parse::<f64>()) {
            (Ok(lo), Ok(hi)) if lo < hi => Some((lo, hi)),
            _ => None,
        }
    } else {
        None
    };
    parsed
        .map(Some)
        .ok_or_else(|| usage(format!("--range `{text}`: expected lo:hi with lo < hi")))
}

fn map_analysis(e: AnalysisError) -> CliError {
    match e {
        AnalysisError::HistoryTooShort { .. } | AnalysisError::HorizonTooShort { .. } => usage(e),
        AnalysisError::System(_) | AnalysisError::Autodiff(_) | AnalysisError::Eig(_) => {
            runtime(e)
        }
        AnalysisError::EmptyTrace
        | AnalysisError::ZeroModulus { .. }
        | AnalysisError::DefectivePair { .. }
        | AnalysisError::NoClosedOrbit { .. } => CliError::Analysis(e.to_string()),
    }
}
