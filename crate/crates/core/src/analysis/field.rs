//! Scalar fields over a rectangular state-space grid: eigenfunction values
//! φ(x) = wᴴE(x) and reconstruction-error maps. Grid points are evaluated in
//! parallel; per-point failures (e.g. the backward simulation diverging) are
//! recorded as missing rather than aborting the whole field.

use std::io;

use num_complex::Complex64;
use rayon::prelude::*;

use super::{implicit_encode, AnalysisError, EigenPair};
use crate::autodiff::Tape;
use crate::kalman;
use crate::model::KalikoModel;
use crate::systems::{integrate, OdeSystem};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn new(min: f64, max: f64, count: usize) -> GridAxis {
        assert!(count >= 1 && max >= min);
        GridAxis { min, max, count }
    }

    pub fn value(&self, i: usize) -> f64 {
        debug_assert!(i < self.count);
        if self.count == 1 {
            self.min
        } else {
            self.min + (self.max - self.min) * i as f64 / (self.count - 1) as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub x: GridAxis,
    pub y: GridAxis,
}

impl Grid {
    pub fn square(min: f64, max: f64, count: usize) -> Grid {
        Grid { x: GridAxis::new(min, max, count), y: GridAxis::new(min, max, count) }
    }

    pub fn len(&self) -> usize {
        self.x.count * self.y.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (x, y) of the flat index; x varies fastest.
    pub fn point(&self, idx: usize) -> (f64, f64) {
        let ix = idx % self.x.count;
        let iy = idx / self.x.count;
        (self.x.value(ix), self.y.value(iy))
    }
}

/// Complex values over a grid; `None` marks points whose evaluation failed.
#[derive(Debug, Clone)]
pub struct ScalarField {
    pub grid: Grid,
    pub values: Vec<Option<Complex64>>,
}

impl ScalarField {
    pub fn get(&self, ix: usize, iy: usize) -> Option<Complex64> {
        self.values[iy * self.grid.x.count + ix]
    }

    pub fn missing(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    pub fn present(&self) -> impl Iterator<Item = Complex64> + '_ {
        self.values.iter().flatten().copied()
    }

    /// Nearest-rank quantile of |value| over present points.
    pub fn quantile_abs(&self, q: f64) -> Option<f64> {
        let mut mods: Vec<f64> = self.present().map(|z| z.norm()).collect();
        if mods.is_empty() {
            return None;
        }
        mods.sort_by(|a, b| a.partial_cmp(b).expect("finite moduli"));
        let idx = ((mods.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
        Some(mods[idx])
    }
}

fn eval_grid(
    grid: Grid,
    f: impl Fn(f64, f64) -> Option<Complex64> + Sync,
) -> ScalarField {
    let values: Vec<Option<Complex64>> =
        (0..grid.len()).into_par_iter().map(|idx| {
            let (x, y) = grid.point(idx);
            f(x, y)
        }).collect();
    ScalarField { grid, values }
}

/// φ over the grid: wᴴ·E(x) per point, with E realized by filtering a
/// backward-simulated warmup history. Failed points are missing.
pub fn eigenfunction_field(
    model: &KalikoModel,
    sys: &OdeSystem,
    dt: f64,
    pair: &EigenPair,
    grid: Grid,
    warmup: usize,
) -> Result<ScalarField, AnalysisError> {
    let spec = model.config.chunk_spec();
    let needed = spec.n_d * spec.c;
    if warmup < needed {
        return Err(AnalysisError::HistoryTooShort { got: warmup, needed });
    }
    Ok(eval_grid(grid, |x, y| {
        let z = implicit_encode(model, sys, dt, &[x, y], warmup).ok()?;
        Some(pair.eigenfunction(&z))
    }))
}

/// Mean absolute error between a trajectory and the decoded filtered means
/// over the rows the windows cover, in normalized units.
pub fn reconstruction_error(
    model: &KalikoModel,
    states: &Tensor,
) -> Result<f64, AnalysisError> {
    let spec = model.config.chunk_spec();
    let needed = spec.n_d * spec.c;
    if states.rows() < needed {
        return Err(AnalysisError::HistoryTooShort { got: states.rows(), needed });
    }
    let normed = model.norm.normalize(states);
    let measurements = spec.windows(&normed);

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let steps =
        kalman::filter(&mut tape, &bound.dynamics, &bound.decoder, &bound.prior, &measurements)?;
    let windows: Vec<Tensor> = steps
        .iter()
        .map(|s| {
            let d = bound.decoder.decode(&mut tape, s.filtered.mean);
            tape.value(d).clone()
        })
        .collect();
    let recon = spec.unchunk(&windows);

    // Normalized units, so one threshold is comparable across systems.
    let covered = recon.rows();
    let mut abs_sum = 0.0;
    for r in 0..covered {
        for (a, b) in recon.row(r).iter().zip(normed.row(r)) {
            abs_sum += (a - b).abs();
        }
    }
    Ok(abs_sum / (covered * spec.n) as f64)
}

/// Reconstruction-error map: per grid point, simulate `horizon` raw steps of
/// the true system from that point, filter, and report the mean absolute
/// error of the decoded filtered means. Values are real (im = 0).
pub fn reconstruction_heatmap(
    model: &KalikoModel,
    sys: &OdeSystem,
    dt: f64,
    grid: Grid,
    horizon: usize,
) -> Result<ScalarField, AnalysisError> {
    let spec = model.config.chunk_spec();
    let needed = spec.n_d * spec.c;
    if horizon < needed {
        return Err(AnalysisError::HorizonTooShort { got: horizon, needed });
    }
    Ok(eval_grid(grid, |x, y| {
        let states = integrate(sys, &[x, y], dt, horizon - 1).ok()?;
        reconstruction_error(model, &states).ok().map(|e| Complex64::new(e, 0.0))
    }))
}

/// `x1,x2,re,im,abs,arg` rows, y-major scan, missing points skipped.
pub fn write_field_csv(field: &ScalarField, w: &mut impl io::Write) -> io::Result<()> {
    writeln!(w, "x1,x2,re,im,abs,arg")?;
    for iy in 0..field.grid.y.count {
        for ix in 0..field.grid.x.count {
            if let Some(z) = field.get(ix, iy) {
                writeln!(
                    w,
                    "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                    field.grid.x.value(ix),
                    field.grid.y.value(iy),
                    z.re,
                    z.im,
                    z.norm(),
                    z.arg()
                )?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldQuantity {
    Abs,
    Re,
    Im,
    Arg,
}

impl FieldQuantity {
    fn extract(self, z: Complex64) -> f64 {
        match self {
            FieldQuantity::Abs => z.norm(),
            FieldQuantity::Re => z.re,
            FieldQuantity::Im => z.im,
            FieldQuantity::Arg => z.arg(),
        }
    }
}

fn ramp(t: f64) -> (u8, u8, u8) {
    // dark violet → blue → teal → green → yellow
    const STOPS: [(f64, f64, f64); 5] = [
        (0.267, 0.005, 0.329),
        (0.254, 0.265, 0.530),
        (0.128, 0.567, 0.551),
        (0.369, 0.789, 0.383),
        (0.993, 0.906, 0.144),
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let lerp = |a: f64, b: f64| ((a + (b - a) * f) * 255.0).round() as u8;
    (
        lerp(STOPS[i].0, STOPS[i + 1].0),
        lerp(STOPS[i].1, STOPS[i + 1].1),
        lerp(STOPS[i].2, STOPS[i + 1].2),
    )
}

/// Standalone SVG heatmap of one quantity with a linear color map. `range`
/// overrides the auto min/max; missing cells are gray.
pub fn write_field_svg(
    field: &ScalarField,
    quantity: FieldQuantity,
    range: Option<(f64, f64)>,
    w: &mut impl io::Write,
) -> io::Result<()> {
    let (nx, ny) = (field.grid.x.count, field.grid.y.count);
    let cell = (800 / nx.max(ny)).max(1);
    let (width, height) = (nx * cell, ny * cell);
    let (lo, hi) = range.unwrap_or_else(|| {
        let vals: Vec<f64> = field.present().map(|z| quantity.extract(z)).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() && hi > lo {
            (lo, hi)
        } else {
            (0.0, 1.0)
        }
    });
    let span = if hi > lo { hi - lo } else { 1.0 };

    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )?;
    for iy in 0..ny {
        for ix in 0..nx {
            let fill = match field.get(ix, iy) {
                Some(z) => {
                    let (r, g, b) = ramp((quantity.extract(z) - lo) / span);
                    format!("#{r:02x}{g:02x}{b:02x}")
                }
                None => "#7f7f7f".to_string(),
            };
            let (px, py) = (ix * cell, (ny - 1 - iy) * cell);
            writeln!(w, r#"<rect x="{px}" y="{py}" width="{cell}" height="{cell}" fill="{fill}"/>"#)?;
        }
    }
    writeln!(w, "</svg>")
}
