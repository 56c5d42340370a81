//! Spectral analysis of a trained model: eigendecomposition of the learned
//! transition, implicit encoding of single states through the filter,
//! eigenfunction fields over the plane, limit-cycle traces with winding
//! numbers, eigenspace projection of trajectories, and reconstruction-error
//! maps.

mod eig;
mod field;

pub use eig::{eig, write_spectrum_csv, EigError, EigenPair, RESIDUAL_REL};
pub use num_complex::Complex64;
pub use field::{
    eigenfunction_field, reconstruction_error, reconstruction_heatmap, write_field_csv,
    write_field_svg, FieldQuantity, Grid, GridAxis, ScalarField,
};

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape};
use crate::kalman;
use crate::model::KalikoModel;
use crate::systems::{integrate, integrate_ending_at, OdeSystem, SystemsError};
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("history has {got} raw states; one measurement window needs {needed}")]
    HistoryTooShort { got: usize, needed: usize },
    #[error("empty eigenfunction trace")]
    EmptyTrace,
    #[error("eigenfunction modulus vanishes along the trace (min {min:e}); winding undefined")]
    ZeroModulus { min: f64 },
    #[error("eigenpair is defective: |w^H v| = {dot:e}")]
    DefectivePair { dot: f64 },
    #[error("no closed orbit within {steps} steps (closest return {closest:e})")]
    NoClosedOrbit { steps: usize, closest: f64 },
    #[error("horizon of {got} raw steps is shorter than one window ({needed})")]
    HorizonTooShort { got: usize, needed: usize },
    #[error(transparent)]
    Eig(#[from] EigError),
    #[error(transparent)]
    System(#[from] SystemsError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Filtered latent means for an explicit raw history, tail-aligned: leading
/// rows that do not fill a whole chunk are dropped, so the last window ends
/// exactly at the last row. Returns one (m, 1) mean per window.
pub fn filtered_means(model: &KalikoModel, states: &Tensor) -> Result<Vec<Tensor>, AnalysisError> {
    let spec = model.config.chunk_spec();
    let needed = spec.n_d * spec.c;
    if states.rows() < needed {
        return Err(AnalysisError::HistoryTooShort { got: states.rows(), needed });
    }
    let offset = states.rows() % spec.c;
    let trimmed = if offset == 0 {
        states.clone()
    } else {
        let rows = states.rows() - offset;
        let mut data = Vec::with_capacity(rows * spec.n);
        for r in offset..states.rows() {
            data.extend_from_slice(states.row(r));
        }
        Tensor::new(&[rows, spec.n], data)
    };
    let normed = model.norm.normalize(&trimmed);
    let measurements = spec.windows(&normed);

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let steps =
        kalman::filter(&mut tape, &bound.dynamics, &bound.decoder, &bound.prior, &measurements)?;
    Ok(steps.iter().map(|s| tape.value(s.filtered.mean).clone()).collect())
}

/// The latent code of a raw history: the final filtered mean, aligned with
/// the history's last row. This is the implicit encoder — the filter run on
/// the window that ends at the state of interest.
pub fn encode_history(model: &KalikoModel, states: &Tensor) -> Result<Tensor, AnalysisError> {
    let means = filtered_means(model, states)?;
    Ok(means.into_iter().next_back().expect("at least one window"))
}

/// Encode a single state: simulate the true vector field backward so a
/// `warmup`-row trajectory ends exactly at `x`, then filter it.
pub fn implicit_encode(
    model: &KalikoModel,
    sys: &OdeSystem,
    dt: f64,
    x: &[f64],
    warmup: usize,
) -> Result<Tensor, AnalysisError> {
    let spec = model.config.chunk_spec();
    let needed = spec.n_d * spec.c;
    if warmup < needed {
        return Err(AnalysisError::HistoryTooShort { got: warmup, needed });
    }
    let history = integrate_ending_at(sys, x, dt, warmup - 1)?;
    encode_history(model, &history)
}

/// Winding number of a closed complex trace: unwrap the argument with a π
/// jump threshold, close the loop back to the first sample, divide the total
/// change by 2π and round.
pub fn winding_number(values: &[Complex64]) -> Result<i64, AnalysisError> {
    if values.is_empty() {
        return Err(AnalysisError::EmptyTrace);
    }
    let max_mod = values.iter().map(|z| z.norm()).fold(0.0_f64, f64::max);
    let min_mod = values.iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min);
    if !(max_mod.is_finite()) || min_mod < 1e-12 * max_mod {
        return Err(AnalysisError::ZeroModulus { min: min_mod });
    }
    let mut total = 0.0;
    let mut prev = values[0].arg();
    for z in values.iter().skip(1).chain(std::iter::once(&values[0])) {
        let arg = z.arg();
        let mut d = arg - prev;
        while d > std::f64::consts::PI {
            d -= std::f64::consts::TAU;
        }
        while d < -std::f64::consts::PI {
            d += std::f64::consts::TAU;
        }
        total += d;
        prev = arg;
    }
    Ok((total / std::f64::consts::TAU).round() as i64)
}

#[derive(Debug, Clone)]
pub struct CycleTrace {
    /// φ at each cycle sample.
    pub values: Vec<Complex64>,
    pub winding: i64,
}

impl CycleTrace {
    /// Coefficient of variation of |φ| along the trace.
    pub fn modulus_cv(&self) -> f64 {
        let mods: Vec<f64> = self.values.iter().map(|z| z.norm()).collect();
        let mean = mods.iter().sum::<f64>() / mods.len() as f64;
        let var = mods.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / mods.len() as f64;
        var.sqrt() / mean
    }
}

/// Evaluate φ = wᴴE(x) along a closed orbit (rows of `cycle`) and compute the
/// winding number of the resulting complex trace.
pub fn limit_cycle_trace(
    model: &KalikoModel,
    sys: &OdeSystem,
    dt: f64,
    pair: &EigenPair,
    cycle: &Tensor,
    warmup: usize,
) -> Result<CycleTrace, AnalysisError> {
    let rows = cycle.rows();
    if rows == 0 {
        return Err(AnalysisError::EmptyTrace);
    }
    let values: Vec<Complex64> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let z = implicit_encode(model, sys, dt, cycle.row(r), warmup)?;
            Ok(pair.eigenfunction(&z))
        })
        .collect::<Result<_, AnalysisError>>()?;
    let winding = winding_number(&values)?;
    Ok(CycleTrace { values, winding })
}

/// Rank-one spectral projector P = v wᴴ / (wᴴ v), row-major m×m.
pub fn eigen_projector(pair: &EigenPair) -> Result<Vec<Complex64>, AnalysisError> {
    let s = pair.biorthogonal_product();
    if s.norm() < 1e-10 {
        return Err(AnalysisError::DefectivePair { dot: s.norm() });
    }
    let m = pair.dim();
    let mut p = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            p.push(pair.right[i] * pair.left[j].conj() / s);
        }
    }
    Ok(p)
}

/// P z for a real latent column, using the rank-one form v·(wᴴz)/(wᴴv).
pub fn project_latent(pair: &EigenPair, z: &Tensor) -> Result<Vec<Complex64>, AnalysisError> {
    let s = pair.biorthogonal_product();
    if s.norm() < 1e-10 {
        return Err(AnalysisError::DefectivePair { dot: s.norm() });
    }
    let phi = pair.eigenfunction(z) / s;
    Ok(pair.right.iter().map(|v| v * phi).collect())
}

#[derive(Debug, Clone)]
pub struct ModeSample {
    /// Raw state the window is aligned with (its last raw row).
    pub state: Vec<f64>,
    /// Decoded eigenspace component at that alignment, in raw units.
    pub displacement: Vec<f64>,
}

/// Filter a raw trajectory, project every filtered latent onto the pair's
/// eigenspace, decode the real part, and report the decoded component at each
/// window's aligned state — quiver-plot samples of the mode's action.
pub fn koopman_mode_project(
    model: &KalikoModel,
    pair: &EigenPair,
    states: &Tensor,
) -> Result<Vec<ModeSample>, AnalysisError> {
    let s = pair.biorthogonal_product();
    if s.norm() < 1e-10 {
        return Err(AnalysisError::DefectivePair { dot: s.norm() });
    }
    let spec = model.config.chunk_spec();
    let means = filtered_means(model, states)?;
    let offset = states.rows() % spec.c;
    let p_dim = spec.window_dim();
    let n = spec.n;

    let mut samples = Vec::with_capacity(means.len());
    for (t, mean) in means.iter().enumerate() {
        let projected = project_latent(pair, mean)?;
        let real: Vec<f64> = projected.iter().map(|z| z.re).collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let zv = tape.constant(Tensor::new(&[pair.dim(), 1], real));
        let decoded = bound.decoder.decode(&mut tape, zv);
        let window = tape.value(decoded);

        let normed_tail: Vec<f64> = window.data()[p_dim - n..].to_vec();
        let zero_ref = model.norm.denormalize_state(&vec![0.0; n]);
        let shifted = model.norm.denormalize_state(&normed_tail);
        let displacement: Vec<f64> =
            shifted.iter().zip(&zero_ref).map(|(a, b)| a - b).collect();

        let aligned_row = offset + (t + spec.n_d) * spec.c - 1;
        samples.push(ModeSample { state: states.row(aligned_row).to_vec(), displacement });
    }
    Ok(samples)
}

/// One period of a closed orbit: settle a transient, then integrate until the
/// trajectory first returns near its starting point. Rows exclude the closing
/// sample, so the tensor is one full period.
pub fn closed_orbit(
    sys: &OdeSystem,
    dt: f64,
    x0: &[f64],
    settle: usize,
    max_steps: usize,
) -> Result<Tensor, AnalysisError> {
    let start = if settle > 0 {
        let transient = integrate(sys, x0, dt, settle)?;
        transient.row(transient.rows() - 1).to_vec()
    } else {
        x0.to_vec()
    };
    let path = integrate(sys, &start, dt, max_steps)?;
    let n = path.cols();
    let dist = |r: usize| -> f64 {
        path.row(r)
            .iter()
            .zip(path.row(0))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let d: Vec<f64> = (0..path.rows()).map(dist).collect();
    let d_max = d.iter().cloned().fold(0.0_f64, f64::max);
    if d_max == 0.0 {
        return Err(AnalysisError::NoClosedOrbit { steps: max_steps, closest: 0.0 });
    }
    let escape = match d.iter().position(|&v| v >= 0.5 * d_max) {
        Some(t) => t,
        None => return Err(AnalysisError::NoClosedOrbit { steps: max_steps, closest: d_max }),
    };
    let tol = 0.05 * d_max;
    let mut closest = f64::INFINITY;
    for t in escape + 1..path.rows() {
        closest = closest.min(d[t]);
        let turning = t + 1 == path.rows() || d[t + 1] >= d[t];
        if d[t] <= tol && turning {
            let mut data = Vec::with_capacity(t * n);
            for r in 0..t {
                data.extend_from_slice(path.row(r));
            }
            return Ok(Tensor::new(&[t, n], data));
        }
    }
    Err(AnalysisError::NoClosedOrbit { steps: max_steps, closest })
}

#[derive(Debug, Clone, Copy)]
pub struct ClosureDiagnostic {
    /// Median over probes of ‖E(F(x)) − A·E(x)‖.
    pub median_residual: f64,
    /// Median over probes of ‖E(x)‖.
    pub median_latent_norm: f64,
}

/// How linearly the learned operator advances the implicit embedding: encode
/// each probe state, advance it one chunk (c raw steps) along the true flow,
/// encode again, and compare with A acting on the first code. Reported as a
/// diagnostic, not asserted — residuals well below the latent norm indicate
/// the closure property holds on the probed region.
pub fn closure_residual(
    model: &KalikoModel,
    sys: &OdeSystem,
    dt: f64,
    probes: &Tensor,
    warmup: usize,
) -> Result<ClosureDiagnostic, AnalysisError> {
    let a = model.transition_matrix();
    let spec = model.config.chunk_spec();
    let per: Vec<(f64, f64)> = (0..probes.rows())
        .into_par_iter()
        .map(|r| {
            let x = probes.row(r);
            let z = implicit_encode(model, sys, dt, x, warmup)?;
            let ahead = integrate(sys, x, dt, spec.c)?;
            let z_next =
                implicit_encode(model, sys, dt, ahead.row(ahead.rows() - 1), warmup)?;
            let az = matmul(&a, &z);
            let res = z_next
                .data()
                .iter()
                .zip(az.data())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            Ok((res, z.frob_norm()))
        })
        .collect::<Result<_, AnalysisError>>()?;
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        v[v.len() / 2]
    };
    Ok(ClosureDiagnostic {
        median_residual: median(per.iter().map(|p| p.0).collect()),
        median_latent_norm: median(per.iter().map(|p| p.1).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderVariant, KalikoModel, ModelConfig};
    use crate::tensor::Tensor;

    fn unit_circle_trace(k: usize) -> Vec<Complex64> {
        (0..k)
            .map(|i| Complex64::from_polar(1.0, std::f64::consts::TAU * i as f64 / k as f64))
            .collect()
    }

    #[test]
    fn winding_counts_one_revolution() {
        let trace = unit_circle_trace(37);
        assert_eq!(winding_number(&trace).unwrap(), 1);
        let conj: Vec<Complex64> = trace.iter().map(|z| z.conj()).collect();
        assert_eq!(winding_number(&conj).unwrap(), -1);
        let double: Vec<Complex64> = (0..64)
            .map(|i| Complex64::from_polar(2.5, 2.0 * std::f64::consts::TAU * i as f64 / 64.0))
            .collect();
        assert_eq!(winding_number(&double).unwrap(), 2);
    }

    #[test]
    fn winding_rejects_vanishing_modulus() {
        let mut trace = unit_circle_trace(10);
        trace[4] = Complex64::new(0.0, 0.0);
        assert!(matches!(winding_number(&trace), Err(AnalysisError::ZeroModulus { .. })));
        assert!(matches!(winding_number(&[]), Err(AnalysisError::EmptyTrace)));
    }

    #[test]
    fn eigenfunction_scaling_is_exact() {
        let z = Tensor::new(&[3, 1], vec![0.3, -1.7, 2.2]);
        let pair = EigenPair {
            value: Complex64::new(0.9, 0.1),
            right: vec![Complex64::new(1.0, 0.0); 3],
            left: vec![
                Complex64::new(0.4, -0.2),
                Complex64::new(-1.1, 0.7),
                Complex64::new(0.05, 0.3),
            ],
        };
        let doubled = EigenPair {
            value: pair.value,
            right: pair.right.clone(),
            left: pair.left.iter().map(|w| w * 2.0).collect(),
        };
        let phi = pair.eigenfunction(&z);
        let phi2 = doubled.eigenfunction(&z) / 2.0;
        assert_eq!(phi.re, phi2.re);
        assert_eq!(phi.im, phi2.im);
    }

    #[test]
    fn projector_is_idempotent_on_generic_pairs() {
        let a = Tensor::new(&[3, 3], vec![0.9, 0.2, 0.0, -0.3, 0.7, 0.1, 0.0, 0.4, 0.5]);
        let pairs = eig(&a).unwrap();
        let pair = &pairs[0];
        let m = pair.dim();
        let p = eigen_projector(pair).unwrap();
        // P² == P
        for i in 0..m {
            for j in 0..m {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..m {
                    acc += p[i * m + k] * p[k * m + j];
                }
                assert!((acc - p[i * m + j]).norm() < 1e-10, "P² differs at ({i},{j})");
            }
        }
        // Pv == v
        for i in 0..m {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..m {
                acc += p[i * m + k] * pair.right[k];
            }
            assert!((acc - pair.right[i]).norm() < 1e-10);
        }
        // w ⊥ z ⇒ Pz == 0: build z = v - v/(wᴴv)… simpler: z orthogonal to w.
        let w = &pair.left;
        let mut z = vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)];
        // Gram–Schmidt against w.
        let wz: Complex64 = w.iter().zip(&z).map(|(a, b)| a.conj() * b).sum();
        let ww: Complex64 = w.iter().map(|a| a.conj() * a).sum();
        for (zi, wi) in z.iter_mut().zip(w) {
            *zi -= wi * (wz / ww);
        }
        for i in 0..m {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..m {
                acc += p[i * m + k] * z[k];
            }
            assert!(acc.norm() < 1e-10);
        }
    }

    #[test]
    fn defective_pair_is_rejected_by_projector() {
        let a = Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]);
        let pairs = eig(&a).unwrap();
        assert!(matches!(
            eigen_projector(&pairs[0]),
            Err(AnalysisError::DefectivePair { .. })
        ));
    }

    #[test]
    fn vdp_limit_cycle_closes_with_known_period() {
        let sys = OdeSystem::VanDerPol;
        let cycle = closed_orbit(&sys, 0.01, &[2.0, 0.0], 3000, 1200).unwrap();
        let period = cycle.rows() as f64 * 0.01;
        // μ = 1 relaxation oscillation period.
        assert!((period - 6.663).abs() < 0.15, "period {period}");
        assert!(cycle.rows() > 100);
    }

    #[test]
    fn conservative_well_orbit_matches_linearized_frequency() {
        let sys = OdeSystem::Duffing { delta: 0.0 };
        let orbit = closed_orbit(&sys, 0.005, &[1.05, 0.0], 0, 2000).unwrap();
        let period = orbit.rows() as f64 * 0.005;
        let linearized = std::f64::consts::TAU / 2.0_f64.sqrt();
        assert!((period - linearized).abs() < 0.02 * linearized, "period {period}");
    }

    #[test]
    fn encode_is_deterministic_and_tail_aligned() {
        let config = ModelConfig {
            n: 2,
            n_d: 2,
            ell: 4,
            c: 3,
            hidden: 8,
            decoder: DecoderVariant::Conv,
            fixed_prior: false,
        };
        let model = KalikoModel::new(config, 11);
        let rows = 13; // 13 % 3 = 1 leading row dropped
        let states = Tensor::new(
            &[rows, 2],
            (0..rows * 2).map(|i| (i as f64 * 0.37).sin()).collect(),
        );
        let a = encode_history(&model, &states).unwrap();
        let b = encode_history(&model, &states).unwrap();
        assert_eq!(a.data(), b.data());

        let mut tail = Vec::new();
        for r in 1..rows {
            tail.extend_from_slice(states.row(r));
        }
        let trimmed = Tensor::new(&[rows - 1, 2], tail);
        let c = encode_history(&model, &trimmed).unwrap();
        assert_eq!(a.data(), c.data());
    }

    #[test]
    fn encode_rejects_short_histories() {
        let model = KalikoModel::new(ModelConfig::defaults(2), 0);
        let spec = model.config.chunk_spec();
        let states = Tensor::zeros(&[spec.n_d * spec.c - 1, 2]);
        assert!(matches!(
            encode_history(&model, &states),
            Err(AnalysisError::HistoryTooShort { .. })
        ));
        assert!(matches!(
            implicit_encode(&model, &OdeSystem::VanDerPol, 0.05, &[1.0, 0.0], 3),
            Err(AnalysisError::HistoryTooShort { .. })
        ));
    }

    #[test]
    fn single_delay_diagonal_blocks_have_exact_spectrum() {
        // With one delay block the transition IS the learned block, and a
        // diagonal block's eigenvalues are its diagonal entries, bit for bit.
        let config = ModelConfig {
            n: 2,
            n_d: 1,
            ell: 3,
            c: 1,
            hidden: 4,
            decoder: DecoderVariant::Mlp,
            fixed_prior: false,
        };
        let mut model = KalikoModel::new(config, 0);
        let id = model.store.id_by_name("blocks").unwrap();
        *model.store.value_mut(id) = Tensor::new(
            &[3, 3],
            vec![0.9, 0.0, 0.0, 0.0, -0.3, 0.0, 0.0, 0.0, 0.4],
        );
        let a = model.transition_matrix();
        let pairs = eig(&a).unwrap();
        let values: Vec<f64> = pairs.iter().map(|p| p.value.re).collect();
        assert_eq!(values, vec![0.9, 0.4, -0.3]);
        assert!(pairs.iter().all(|p| p.value.im == 0.0));
    }

    #[test]
    fn closure_diagnostic_yields_finite_medians() {
        let config = ModelConfig {
            n: 2,
            n_d: 2,
            ell: 4,
            c: 2,
            hidden: 8,
            decoder: DecoderVariant::Conv,
            fixed_prior: false,
        };
        let model = KalikoModel::new(config, 7);
        let probes = Tensor::new(&[3, 2], vec![1.0, 0.0, -0.5, 0.8, 0.2, -1.1]);
        let diag =
            closure_residual(&model, &OdeSystem::VanDerPol, 0.05, &probes, 12).unwrap();
        assert!(diag.median_residual.is_finite() && diag.median_residual >= 0.0);
        assert!(diag.median_latent_norm.is_finite() && diag.median_latent_norm > 0.0);
    }

    #[test]
    fn mode_samples_align_with_trajectory_rows() {
        let config = ModelConfig {
            n: 2,
            n_d: 2,
            ell: 3,
            c: 2,
            hidden: 6,
            decoder: DecoderVariant::Conv,
            fixed_prior: false,
        };
        let model = KalikoModel::new(config, 3);
        let a = model.transition_matrix();
        let pairs = eig(&a).unwrap();
        let pair = pairs.iter().find(|p| p.biorthogonal_product().norm() > 1e-6).unwrap();

        let states = integrate(&OdeSystem::VanDerPol, &[1.0, 0.5], 0.05, 15).unwrap();
        let samples = koopman_mode_project(&model, pair, &states).unwrap();
        let spec = model.config.chunk_spec();
        assert_eq!(samples.len(), spec.n_windows(states.rows()));
        for (t, s) in samples.iter().enumerate() {
            let aligned = states.rows() % spec.c + (t + spec.n_d) * spec.c - 1;
            assert_eq!(s.state, states.row(aligned).to_vec());
            assert_eq!(s.displacement.len(), 2);
            assert!(s.displacement.iter().all(|v| v.is_finite()));
        }
    }
}
