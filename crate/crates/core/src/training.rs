//! Replay-overshooting training: filter a window, smooth back to its start,
//! re-roll the window open loop from the smoothed initial belief, and score
//! both the one-step-ahead filter reconstructions and the open-loop replay
//! against the data. Adam on the summed objective.
//!
//! Batches are evaluated in parallel, but gradients are reduced serially in
//! window order, so results are bit-identical regardless of thread count.

use crate::autodiff::{AutodiffError, Gradients, ParamStore, Tape, Var};
use crate::kalman;
use crate::model::{bind_with, BoundModel, KalikoModel};
use crate::systems::Dataset;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("non-finite loss or gradient at step {step} (source: {source_op}); parameters left at last completed step")]
    NonFinite { step: u64, source_op: String },
    #[error("training window needs {needed} raw states; longest trajectory has {available}")]
    DataTooShort { needed: usize, available: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("report io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer steps to run (on top of whatever the model already has).
    pub steps: u64,
    /// Filter steps per training window.
    pub window_len: usize,
    /// Windows per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    /// Weight on the one-step-ahead filter term.
    pub alpha_filter: f64,
    /// Weight on the open-loop replay term.
    pub alpha_pred: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            window_len: 32,
            batch: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 10.0,
            alpha_filter: 1.0,
            alpha_pred: 1.0,
            seed: 0,
        }
    }
}

pub struct WindowLoss {
    pub loss: Var,
    pub filter_term: Var,
    pub pred_term: Var,
}

/// Builds the replay-overshooting objective for one window of measurements:
///
///   α_f Σ_t ‖g(μ_{t|t−1}) − y_t‖²  +  α_p Σ_t ‖g(μ̄_t) − y_t‖²
///
/// where μ̄ is the open-loop rollout from the smoothed initial belief. Sums
/// of squares, not means: window length is part of the objective's scale.
pub fn replay_loss(
    tape: &mut Tape,
    bound: &BoundModel,
    ys: &[Tensor],
    alpha_filter: f64,
    alpha_pred: f64,
) -> Result<WindowLoss, AutodiffError> {
    let steps = kalman::filter(tape, &bound.dynamics, &bound.decoder, &bound.prior, ys)?;
    let smoothed = kalman::smooth(tape, &bound.dynamics, &bound.prior, &steps)?;
    let replay = kalman::rollout(tape, &bound.dynamics, &smoothed[0], ys.len());

    let mut filter_term: Option<Var> = None;
    let mut pred_term: Option<Var> = None;
    for (t, y) in ys.iter().enumerate() {
        let yv = tape.constant(y.clone());
        let lf = tape.sum_sq_diff(steps[t].predicted_obs, yv);
        filter_term = Some(match filter_term {
            None => lf,
            Some(acc) => tape.add(acc, lf),
        });
        let decoded = bound.decoder.decode(tape, replay[t].mean);
        let lp = tape.sum_sq_diff(decoded, yv);
        pred_term = Some(match pred_term {
            None => lp,
            Some(acc) => tape.add(acc, lp),
        });
    }
    let filter_term = filter_term.expect("at least one measurement");
    let pred_term = pred_term.expect("at least one measurement");
    let sf = tape.scale(filter_term, alpha_filter);
    let sp = tape.scale(pred_term, alpha_pred);
    let loss = tape.add(sf, sp);
    Ok(WindowLoss { loss, filter_term, pred_term })
}

/// Adam with bias correction. Moments are indexed by parameter id; the state
/// lives only for the duration of a `train` call (checkpoints persist
/// parameters and the step counter, not optimizer moments).
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, n_params: usize) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let idx = id.index();
            let m = self.m[idx].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[idx].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let value = store.value_mut(id);
            for ((p, mi), (vi, &gi)) in value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut().iter_mut().zip(g.data()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_filter: f64,
    pub loss_pred: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss_filter + r.loss_pred)
    }

    /// `step,loss_filter,loss_pred,grad_norm,wall_ms` with full precision.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::from("step,loss_filter,loss_pred,grad_norm,wall_ms\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.3}\n",
                r.step, r.loss_filter, r.loss_pred, r.grad_norm, r.wall_ms
            ));
        }
        std::fs::write(path, out)
    }
}

/// Each optimizer step draws its own generator from (seed, step), so a
/// resumed run continues the exact schedule the uninterrupted run would have
/// used.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (step + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

enum WindowFailure {
    NonFinite(&'static str),
    Autodiff(AutodiffError),
}

/// Runs `cfg.steps` optimizer steps, mutating the model in place. On the
/// first step of a fresh model the dataset's normalization is frozen into
/// the model. A non-finite loss or gradient aborts before any parameter
/// update, so the model is always left at its last completed step.
pub fn train(model: &mut KalikoModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, TrainingError> {
    let spec = model.config.chunk_spec();
    let coverage = (cfg.window_len + model.config.n_d - 1) * model.config.c;
    if model.step == 0 {
        model.norm = data.norm.clone();
    }
    let normed: Vec<Tensor> =
        data.trajectories.iter().map(|t| model.norm.normalize(&t.states)).collect();
    let eligible: Vec<usize> =
        normed.iter().enumerate().filter(|(_, s)| s.rows() >= coverage).map(|(i, _)| i).collect();
    if eligible.is_empty() {
        let available = normed.iter().map(Tensor::rows).max().unwrap_or(0);
        return Err(TrainingError::DataTooShort { needed: coverage, available });
    }

    let mut adam = Adam::new(cfg, model.store.len());
    let mut report = TrainReport::default();

    for _ in 0..cfg.steps {
        let step = model.step;
        let t0 = Instant::now();
        let mut rng = step_rng(cfg.seed, step);
        let windows: Vec<Vec<Tensor>> = (0..cfg.batch)
            .map(|_| {
                let ti = eligible[rng.gen_range(0..eligible.len())];
                let s = &normed[ti];
                let r0 = rng.gen_range(0..=s.rows() - coverage);
                (0..cfg.window_len)
                    .map(|t| spec.window_at_raw(s, r0 + t * spec.c))
                    .collect()
            })
            .collect();

        let config = model.config;
        let store = &model.store;
        let outcomes: Vec<Result<(Gradients, f64, f64), WindowFailure>> = windows
            .par_iter()
            .map(|ys| {
                let mut tape = Tape::new();
                let bound = bind_with(&config, store, &mut tape);
                let wl = replay_loss(&mut tape, &bound, ys, cfg.alpha_filter, cfg.alpha_pred)
                    .map_err(WindowFailure::Autodiff)?;
                if let Some(tag) = tape.poisoned() {
                    return Err(WindowFailure::NonFinite(tag));
                }
                let f_val = tape.value(wl.filter_term).item();
                let p_val = tape.value(wl.pred_term).item();
                let grads = tape.backward(wl.loss, store).map_err(WindowFailure::Autodiff)?;
                Ok((grads, f_val, p_val))
            })
            .collect();

        // Ordered serial reduction: identical across thread counts.
        let mut total: Option<Gradients> = None;
        let mut loss_f = 0.0;
        let mut loss_p = 0.0;
        for outcome in outcomes {
            let (g, f, p) = outcome.map_err(|e| match e {
                WindowFailure::NonFinite(tag) => {
                    TrainingError::NonFinite { step, source_op: tag.to_string() }
                }
                WindowFailure::Autodiff(AutodiffError::NonFiniteGrad { param }) => {
                    TrainingError::NonFinite { step, source_op: format!("grad of {param}") }
                }
                WindowFailure::Autodiff(e) => TrainingError::NonFinite { step, source_op: e.to_string() },
            })?;
            match &mut total {
                None => total = Some(g),
                Some(acc) => acc.add_in_place(&g),
            }
            loss_f += f;
            loss_p += p;
        }
        let mut grads = total.expect("batch is non-empty");
        let scale = 1.0 / cfg.batch as f64;
        grads.scale(scale);
        loss_f *= scale;
        loss_p *= scale;

        let grad_norm = grads.norm();
        if !grad_norm.is_finite() || !loss_f.is_finite() || !loss_p.is_finite() {
            return Err(TrainingError::NonFinite { step, source_op: "batch reduction".into() });
        }
        if grad_norm > cfg.grad_clip {
            grads.scale(cfg.grad_clip / grad_norm);
        }
        adam.step(&mut model.store, &grads);
        model.step += 1;

        report.records.push(StepRecord {
            step: model.step,
            loss_filter: loss_f,
            loss_pred: loss_p,
            grad_norm,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(report)
}
