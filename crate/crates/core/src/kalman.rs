//! Extended Kalman filter, RTS smoother and open-loop rollout, written
//! against the tape so every output stays differentiable with respect to the
//! model parameters.
//!
//! Conventions: the prior belief lives at time 0, measurements y₁..y_T are
//! assimilated at times 1..T (predict, then update). Covariances are
//! re-symmetrized after every step that can break symmetry in floating point.

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GaussianBelief {
    pub mean: Var,
    pub cov: Var,
}

/// Latent dynamics: mean propagation, left multiplication by the transition
/// matrix, and process noise. `conjugate_cov` (A·Σ·Aᵀ) has a default that
/// only assumes Σ is symmetric, so structured implementations get it for
/// free from their `left_mul`.
pub trait TransitionModel {
    /// A·M for an (m, k) operand.
    fn left_mul(&self, tape: &mut Tape, m: Var) -> Var;

    fn advance_mean(&self, tape: &mut Tape, mean: Var) -> Var {
        self.left_mul(tape, mean)
    }

    /// A·Σ·Aᵀ assuming Σ = Σᵀ: computed as A·(A·Σ)ᵀ.
    fn conjugate_cov(&self, tape: &mut Tape, cov: Var) -> Var {
        let a_sig = self.left_mul(tape, cov);
        let a_sig_t = tape.transpose(a_sig);
        self.left_mul(tape, a_sig_t)
    }

    fn process_noise(&self, tape: &mut Tape) -> Var;
}

/// Measurement map: predicted observation together with its Jacobian at the
/// evaluation point, plus the observation noise covariance.
pub trait MeasurementModel {
    /// Returns (ŷ, H) at `mean`; H is (p, m).
    fn observe(&self, tape: &mut Tape, mean: Var) -> (Var, Var);

    fn noise(&self, tape: &mut Tape) -> Var;
}

/// Dense transition for tests and small problems.
pub struct DenseTransition {
    pub a: Var,
    pub q: Var,
}

impl TransitionModel for DenseTransition {
    fn left_mul(&self, tape: &mut Tape, m: Var) -> Var {
        tape.matmul(self.a, m)
    }

    fn process_noise(&self, _tape: &mut Tape) -> Var {
        self.q
    }
}

/// Linear observation y = H·z for tests and linear baselines.
pub struct LinearMeasurement {
    pub h: Var,
    pub r: Var,
}

impl MeasurementModel for LinearMeasurement {
    fn observe(&self, tape: &mut Tape, mean: Var) -> (Var, Var) {
        (tape.matmul(self.h, mean), self.h)
    }

    fn noise(&self, _tape: &mut Tape) -> Var {
        self.r
    }
}

/// Time propagation: μ ← A·μ, Σ ← sym(A·Σ·Aᵀ + Q).
pub fn predict(tape: &mut Tape, trans: &impl TransitionModel, belief: &GaussianBelief) -> GaussianBelief {
    let mean = trans.advance_mean(tape, belief.mean);
    let conj = trans.conjugate_cov(tape, belief.cov);
    let q = trans.process_noise(tape);
    let sum = tape.add(conj, q);
    let cov = tape.symmetrize(sum);
    GaussianBelief { mean, cov }
}

pub struct Update {
    /// ŷ = g(μ) at the pre-update mean.
    pub predicted_obs: Var,
    pub innovation: Var,
    pub posterior: GaussianBelief,
}

/// Measurement assimilation. The gain solve uses S = sym(HΣHᵀ + R), and the
/// posterior covariance uses the short form (I − KH)Σ followed by
/// symmetrization.
pub fn update(
    tape: &mut Tape,
    meas: &impl MeasurementModel,
    belief: &GaussianBelief,
    y: &Tensor,
) -> Result<Update, AutodiffError> {
    let (y_hat, h) = meas.observe(tape, belief.mean);
    let y_c = tape.constant(y.clone());
    let innovation = tape.sub(y_c, y_hat);

    let h_sig = tape.matmul(h, belief.cov);
    let h_t = tape.transpose(h);
    let h_sig_ht = tape.matmul(h_sig, h_t);
    let r = meas.noise(tape);
    let s_raw = tape.add(h_sig_ht, r);
    let s = tape.symmetrize(s_raw);

    // K = Σ Hᵀ S⁻¹, obtained as (S⁻¹ H Σ)ᵀ since Σ is symmetric.
    let solved = tape.linear_solve(s, h_sig)?;
    let gain = tape.transpose(solved);

    let correction = tape.matmul(gain, innovation);
    let mean = tape.add(belief.mean, correction);

    let m = tape.shape(belief.mean)[0];
    let kh = tape.matmul(gain, h);
    let i = tape.eye(m);
    let i_kh = tape.sub(i, kh);
    let cov_raw = tape.matmul(i_kh, belief.cov);
    let cov = tape.symmetrize(cov_raw);

    Ok(Update { predicted_obs: y_hat, innovation, posterior: GaussianBelief { mean, cov } })
}

pub struct FilterStep {
    /// Belief after the time update, before assimilating y_t.
    pub predicted: GaussianBelief,
    /// g(μ_{t|t−1}): the model's one-step-ahead reconstruction of y_t.
    pub predicted_obs: Var,
    /// Belief after assimilating y_t.
    pub filtered: GaussianBelief,
}

/// Runs the filter over y₁..y_T from the prior at time 0. Returns one step
/// per measurement.
pub fn filter(
    tape: &mut Tape,
    trans: &impl TransitionModel,
    meas: &impl MeasurementModel,
    prior: &GaussianBelief,
    measurements: &[Tensor],
) -> Result<Vec<FilterStep>, AutodiffError> {
    let mut steps = Vec::with_capacity(measurements.len());
    let mut belief = *prior;
    for y in measurements {
        let predicted = predict(tape, trans, &belief);
        let up = update(tape, meas, &predicted, y)?;
        belief = up.posterior;
        steps.push(FilterStep { predicted, predicted_obs: up.predicted_obs, filtered: belief });
    }
    Ok(steps)
}

/// RTS smoothing pass. Returns T+1 beliefs indexed by time, so `[0]` is the
/// smoothed prior and `[T]` equals the last filtered belief. The smoother
/// gain is Σ_{t|t} Aᵀ Σ_{t+1|t}⁻¹, evaluated as (Σ_{t+1|t}⁻¹ A Σ_{t|t})ᵀ.
pub fn smooth(
    tape: &mut Tape,
    trans: &impl TransitionModel,
    prior: &GaussianBelief,
    steps: &[FilterStep],
) -> Result<Vec<GaussianBelief>, AutodiffError> {
    let t_len = steps.len();
    let mut out = vec![steps[t_len - 1].filtered; t_len + 1];
    out[0] = *prior; // overwritten below unless T = 0
    for t in (0..t_len).rev() {
        let filtered = if t == 0 { *prior } else { steps[t - 1].filtered };
        let pred_next = &steps[t].predicted;
        let next = out[t + 1];

        let a_sig = trans.left_mul(tape, filtered.cov);
        let solved = tape.linear_solve(pred_next.cov, a_sig)?;
        let gain = tape.transpose(solved);

        let dmean = tape.sub(next.mean, pred_next.mean);
        let corr = tape.matmul(gain, dmean);
        let mean = tape.add(filtered.mean, corr);

        let dcov = tape.sub(next.cov, pred_next.cov);
        let gd = tape.matmul(gain, dcov);
        let gain_t = tape.transpose(gain);
        let gdg = tape.matmul(gd, gain_t);
        let cov_raw = tape.add(filtered.cov, gdg);
        let cov = tape.symmetrize(cov_raw);

        out[t] = GaussianBelief { mean, cov };
    }
    Ok(out)
}

/// Open-loop prediction: `horizon` pure time updates from `init`, returning
/// beliefs at times 1..=horizon.
pub fn rollout(
    tape: &mut Tape,
    trans: &impl TransitionModel,
    init: &GaussianBelief,
    horizon: usize,
) -> Vec<GaussianBelief> {
    let mut out = Vec::with_capacity(horizon);
    let mut belief = *init;
    for _ in 0..horizon {
        belief = predict(tape, trans, &belief);
        out.push(belief);
    }
    out
}
