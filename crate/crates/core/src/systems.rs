//! The benchmark dynamical systems, their RK4 integrator, dataset sampling
//! with per-dimension normalization, and on-disk dataset layout (one CSV per
//! trajectory plus a JSON manifest).

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const DIVERGENCE_LIMIT: f64 = 1e6;
const STD_FLOOR: f64 = 1e-6;
const MAX_RESAMPLES: usize = 10;

#[derive(Debug, Error)]
pub enum SystemsError {
    #[error("state norm exceeded {DIVERGENCE_LIMIT:.0e} at step {step}")]
    Diverged { step: usize },
    #[error("trajectory {trajectory}: still diverging after {attempts} resampled initial conditions")]
    RetriesExhausted { trajectory: usize, attempts: usize },
    #[error("unknown system `{0}`")]
    UnknownSystem(String),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset parse: {0}")]
    Parse(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// The planar systems used throughout: a Van der Pol oscillator, an inverted
/// pendulum (ẋ₂ = sin x₁), a Duffing oscillator with damping δ ≥ 0, and a
/// two-limit-cycle system defined in polar form by
/// ṙ = r·e^{(1−2r²)/2}(r² − r⁴ − 3/16), θ̇ = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum OdeSystem {
    VanDerPol,
    Pendulum,
    Duffing { delta: f64 },
    HopfBautin,
}

impl OdeSystem {
    /// CLI-facing names. `delta` only applies to the Duffing oscillator
    /// (default 0.5; pass 0 for the undamped variant).
    pub fn parse(name: &str, delta: Option<f64>) -> Result<Self, SystemsError> {
        match name {
            "vdp" => Ok(OdeSystem::VanDerPol),
            "pendulum" => Ok(OdeSystem::Pendulum),
            "duffing" => Ok(OdeSystem::Duffing { delta: delta.unwrap_or(0.5) }),
            "hopf" => Ok(OdeSystem::HopfBautin),
            other => Err(SystemsError::UnknownSystem(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OdeSystem::VanDerPol => "vdp",
            OdeSystem::Pendulum => "pendulum",
            OdeSystem::Duffing { .. } => "duffing",
            OdeSystem::HopfBautin => "hopf",
        }
    }

    pub fn dim(&self) -> usize {
        2
    }

    pub fn vector_field(&self, x: &[f64], out: &mut [f64]) {
        match self {
            OdeSystem::VanDerPol => {
                out[0] = x[0] - x[0] * x[0] * x[0] / 3.0 - x[1];
                out[1] = x[0];
            }
            OdeSystem::Pendulum => {
                out[0] = x[1];
                out[1] = x[0].sin();
            }
            OdeSystem::Duffing { delta } => {
                out[0] = x[1];
                out[1] = x[0] - delta * x[1] - x[0] * x[0] * x[0];
            }
            OdeSystem::HopfBautin => {
                // Cartesian form of the polar field; the shared factor
                // s = ṙ/r = e^{(1−2r²)/2}(r² − r⁴ − 3/16) is smooth in r², so
                // the origin (a removable singularity of the polar form) maps
                // to the zero vector with no special casing.
                let r2 = x[0] * x[0] + x[1] * x[1];
                let s = ((1.0 - 2.0 * r2) * 0.5).exp() * (r2 - r2 * r2 - 3.0 / 16.0);
                out[0] = s * x[0] - x[1];
                out[1] = s * x[1] + x[0];
            }
        }
    }

    /// Default sampling region for initial conditions.
    pub fn default_init(&self) -> InitRegion {
        match self {
            OdeSystem::VanDerPol | OdeSystem::Duffing { .. } => {
                InitRegion::Rect { lo: vec![-3.0, -3.0], hi: vec![3.0, 3.0] }
            }
            OdeSystem::Pendulum => {
                InitRegion::Rect {
                    lo: vec![-std::f64::consts::PI, -2.0],
                    hi: vec![std::f64::consts::PI, 2.0],
                }
            }
            OdeSystem::HopfBautin => InitRegion::Annulus { r_min: 0.1, r_max: 1.2 },
        }
    }
}

/// Where initial conditions are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitRegion {
    Rect { lo: Vec<f64>, hi: Vec<f64> },
    Annulus { r_min: f64, r_max: f64 },
}

impl InitRegion {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            InitRegion::Rect { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(&a, &b)| if a == b { a } else { rng.gen_range(a..b) })
                .collect(),
            InitRegion::Annulus { r_min, r_max } => {
                let r = rng.gen_range(*r_min..*r_max);
                let th = rng.gen_range(0.0..std::f64::consts::TAU);
                vec![r * th.cos(), r * th.sin()]
            }
        }
    }

    /// Axis-aligned bounds enclosing the region (used for analysis grids).
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            InitRegion::Rect { lo, hi } => (lo.clone(), hi.clone()),
            InitRegion::Annulus { r_max, .. } => {
                (vec![-r_max, -r_max], vec![*r_max, *r_max])
            }
        }
    }
}

/// One classical RK4 step.
pub fn rk4_step(sys: &OdeSystem, x: &[f64], dt: f64) -> Vec<f64> {
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    sys.vector_field(x, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    sys.vector_field(&tmp, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    sys.vector_field(&tmp, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    sys.vector_field(&tmp, &mut k4);

    (0..n)
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Integrates `steps` RK4 steps from `x0`, returning the `steps + 1` visited
/// states as rows. Aborts if any coordinate magnitude exceeds 1e6.
pub fn integrate(sys: &OdeSystem, x0: &[f64], dt: f64, steps: usize) -> Result<Tensor, SystemsError> {
    let n = x0.len();
    let mut data = Vec::with_capacity((steps + 1) * n);
    data.extend_from_slice(x0);
    let mut x = x0.to_vec();
    for step in 1..=steps {
        x = rk4_step(sys, &x, dt);
        if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            return Err(SystemsError::Diverged { step });
        }
        data.extend_from_slice(&x);
    }
    Ok(Tensor::new(&[steps + 1, n], data))
}

/// Integrates backward in time so the returned trajectory (rows ordered
/// forward in time) ends exactly at `x_end`.
pub fn integrate_ending_at(
    sys: &OdeSystem,
    x_end: &[f64],
    dt: f64,
    steps: usize,
) -> Result<Tensor, SystemsError> {
    let n = x_end.len();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);
    rows.push(x_end.to_vec());
    let mut x = x_end.to_vec();
    for step in 1..=steps {
        x = rk4_step(sys, &x, -dt);
        if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            return Err(SystemsError::Diverged { step });
        }
        rows.push(x.clone());
    }
    let mut data = Vec::with_capacity((steps + 1) * n);
    for row in rows.iter().rev() {
        data.extend_from_slice(row);
    }
    Ok(Tensor::new(&[steps + 1, n], data))
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// (T, n) rows of raw states.
    pub states: Tensor,
    pub dt: f64,
}

/// Per-dimension affine normalization, frozen once computed. Evaluation never
/// mutates these statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(n: usize) -> Self {
        NormStats { mean: vec![0.0; n], std: vec![1.0; n] }
    }

    pub fn normalize_state(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((&v, &m), &s)| (v - m) / s).collect()
    }

    pub fn denormalize_state(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((&v, &m), &s)| v * s + m).collect()
    }

    /// Normalizes every row of a (T, n) tensor.
    pub fn normalize(&self, states: &Tensor) -> Tensor {
        self.affine(states, true)
    }

    pub fn denormalize(&self, states: &Tensor) -> Tensor {
        self.affine(states, false)
    }

    fn affine(&self, states: &Tensor, forward: bool) -> Tensor {
        assert_eq!(states.rank(), 2);
        let n = states.cols();
        assert_eq!(n, self.mean.len(), "state dim {} vs stats dim {}", n, self.mean.len());
        let mut out = states.clone();
        for i in 0..states.rows() {
            for j in 0..n {
                let v = states.get2(i, j);
                out.set2(i, j, if forward { (v - self.mean[j]) / self.std[j] } else { v * self.std[j] + self.mean[j] });
            }
        }
        out
    }
}

/// Running per-dimension mean/variance (Welford), fed in emission order.
pub struct RunningStats {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningStats {
    pub fn new(n: usize) -> Self {
        RunningStats { count: 0, mean: vec![0.0; n], m2: vec![0.0; n] }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let c = self.count as f64;
        for j in 0..x.len() {
            let d = x[j] - self.mean[j];
            self.mean[j] += d / c;
            self.m2[j] += d * (x[j] - self.mean[j]);
        }
    }

    pub fn finish(self) -> NormStats {
        let c = (self.count as f64).max(1.0);
        let std = self.m2.iter().map(|&v| (v / c).sqrt().max(STD_FLOOR)).collect();
        NormStats { mean: self.mean, std }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleConfig {
    pub system: OdeSystem,
    pub n_traj: usize,
    /// RK4 steps per trajectory; each trajectory has `steps + 1` states.
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
    pub init: InitRegion,
}

impl SampleConfig {
    pub fn desk(system: OdeSystem, seed: u64) -> Self {
        SampleConfig {
            system,
            n_traj: 64,
            steps: 400,
            dt: 0.05,
            seed,
            init: system.default_init(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SampleConfig,
    pub trajectories: Vec<Trajectory>,
    pub norm: NormStats,
}

/// Samples a dataset. Initial conditions that lead to divergence are
/// resampled (up to 10 times per trajectory); everything is driven by one
/// seeded generator, so a fixed seed reproduces the dataset bit for bit.
pub fn sample_dataset(config: &SampleConfig) -> Result<Dataset, SystemsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trajectories = Vec::with_capacity(config.n_traj);
    for ti in 0..config.n_traj {
        let mut attempts = 0;
        let states = loop {
            let x0 = config.init.sample(&mut rng);
            match integrate(&config.system, &x0, config.dt, config.steps) {
                Ok(t) => break t,
                Err(SystemsError::Diverged { .. }) if attempts < MAX_RESAMPLES => attempts += 1,
                Err(SystemsError::Diverged { .. }) => {
                    return Err(SystemsError::RetriesExhausted { trajectory: ti, attempts })
                }
                Err(e) => return Err(e),
            }
        };
        trajectories.push(Trajectory { states, dt: config.dt });
    }

    let mut stats = RunningStats::new(config.system.dim());
    for t in &trajectories {
        for i in 0..t.states.rows() {
            stats.push(t.states.row(i));
        }
    }
    Ok(Dataset { config: config.clone(), trajectories, norm: stats.finish() })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    system: OdeSystem,
    dt: f64,
    seed: u64,
    n_traj: usize,
    steps: usize,
    init: InitRegion,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
    files: Vec<String>,
}

/// Writes one CSV per trajectory (`t, x1, …, xn` header, 17 significant
/// digits so values round-trip exactly) plus `manifest.json`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), SystemsError> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (i, traj) in ds.trajectories.iter().enumerate() {
        let name = format!("traj_{i:04}.csv");
        let mut out = String::new();
        out.push('t');
        for j in 0..traj.states.cols() {
            out.push_str(&format!(",x{}", j + 1));
        }
        out.push('\n');
        for r in 0..traj.states.rows() {
            out.push_str(&format!("{:.16e}", r as f64 * traj.dt));
            for v in traj.states.row(r) {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        fs::write(dir.join(&name), out)?;
        files.push(name);
    }
    let manifest = Manifest {
        system: ds.config.system,
        dt: ds.config.dt,
        seed: ds.config.seed,
        n_traj: ds.config.n_traj,
        steps: ds.config.steps,
        init: ds.config.init.clone(),
        norm_mean: ds.norm.mean.clone(),
        norm_std: ds.norm.std.clone(),
        files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, SystemsError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut trajectories = Vec::with_capacity(manifest.files.len());
    for name in &manifest.files {
        let text = fs::read_to_string(dir.join(name))?;
        let mut rows: Vec<f64> = Vec::new();
        let mut n_cols = 0;
        for (li, line) in text.lines().enumerate() {
            if li == 0 {
                n_cols = line.split(',').count() - 1;
                if n_cols == 0 {
                    return Err(SystemsError::Parse(format!("{name}: no state columns")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != n_cols + 1 {
                return Err(SystemsError::Parse(format!("{name}:{}: expected {} fields", li + 1, n_cols + 1)));
            }
            for f in &fields[1..] {
                rows.push(f.trim().parse::<f64>().map_err(|e| {
                    SystemsError::Parse(format!("{name}:{}: {e}", li + 1))
                })?);
            }
        }
        let t = rows.len() / n_cols;
        trajectories.push(Trajectory {
            states: Tensor::new(&[t, n_cols], rows),
            dt: manifest.dt,
        });
    }
    Ok(Dataset {
        config: SampleConfig {
            system: manifest.system,
            n_traj: manifest.n_traj,
            steps: manifest.steps,
            dt: manifest.dt,
            seed: manifest.seed,
            init: manifest.init,
        },
        trajectories,
        norm: NormStats { mean: manifest.norm_mean, std: manifest.norm_std },
    })
}
