//! Long-horizon prediction with a trained model: filter the context window
//! by window, then roll the latent belief forward open loop, decode every
//! rollout window, and stitch the overlapping windows back into a raw
//! trajectory.

use crate::autodiff::{AutodiffError, Tape};
use crate::kalman;
use crate::model::KalikoModel;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("context has {got} raw states; one measurement window needs {needed}")]
    ContextTooShort { got: usize, needed: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub struct PredictOutput {
    /// Raw-space predicted states for the `horizon` steps after the context.
    pub predicted: Tensor,
    /// Raw-space reconstruction of the context from post-update filtered
    /// means (decode(μ_{t|t}), windows averaged back together).
    pub reconstruction: Tensor,
    /// trace(Σ) after each open-loop step, in latent units.
    pub rollout_cov_trace: Vec<f64>,
}

/// Filters `context` (raw states, (T, n)) and predicts `horizon` further raw
/// states. The rollout is decoded one window per chunk and the trailing
/// `horizon` rows — exactly the rows past the context's coverage — are
/// returned denormalized.
pub fn predict(
    model: &KalikoModel,
    context: &Tensor,
    horizon: usize,
) -> Result<PredictOutput, InferenceError> {
    let spec = model.config.chunk_spec();
    let needed = spec.n_d * spec.c;
    if context.rows() < needed {
        return Err(InferenceError::ContextTooShort { got: context.rows(), needed });
    }

    let normed = model.norm.normalize(context);
    let measurements = spec.windows(&normed);

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let steps = kalman::filter(&mut tape, &bound.dynamics, &bound.decoder, &bound.prior, &measurements)?;

    let recon_windows: Vec<Tensor> = steps
        .iter()
        .map(|s| {
            let decoded = bound.decoder.decode(&mut tape, s.filtered.mean);
            tape.value(decoded).clone()
        })
        .collect();
    let reconstruction = model.norm.denormalize(&spec.unchunk(&recon_windows));

    if horizon == 0 {
        let predicted = Tensor::new(&[0, spec.n], Vec::new());
        return Ok(PredictOutput { predicted, reconstruction, rollout_cov_trace: Vec::new() });
    }

    let horizon_windows = horizon.div_ceil(spec.c);
    let last = steps.last().expect("context produced at least one window").filtered;
    let path = kalman::rollout(&mut tape, &bound.dynamics, &last, horizon_windows);

    let mut rollout_cov_trace = Vec::with_capacity(horizon_windows);
    let decoded: Vec<Tensor> = path
        .iter()
        .map(|belief| {
            rollout_cov_trace.push(tape.value(belief.cov).trace());
            let d = bound.decoder.decode(&mut tape, belief.mean);
            tape.value(d).clone()
        })
        .collect();

    let stitched = spec.unchunk(&decoded);
    // The rollout's coverage overlaps the context by n_d − 1 chunks; the new
    // rows are exactly the trailing horizon_windows·c.
    let tail_start = stitched.rows() - horizon_windows * spec.c;
    let mut data = Vec::with_capacity(horizon * spec.n);
    for r in tail_start..tail_start + horizon {
        data.extend_from_slice(stitched.row(r));
    }
    let predicted = model.norm.denormalize(&Tensor::new(&[horizon, spec.n], data));

    Ok(PredictOutput { predicted, reconstruction, rollout_cov_trace })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Elementwise error statistics over two equally shaped tensors.
pub fn metrics(pred: &Tensor, truth: &Tensor) -> Metrics {
    assert_eq!(pred.shape(), truth.shape(), "metrics over mismatched shapes");
    let n = pred.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (a, b) in pred.data().iter().zip(truth.data()) {
        let d = a - b;
        se += d * d;
        ae += d.abs();
    }
    Metrics { mse: se / n, mae: ae / n }
}

/// Metrics in the model's normalized space — the scale-free numbers used for
/// cross-system comparisons. Pass raw-space tensors.
pub fn normalized_metrics(model: &KalikoModel, pred_raw: &Tensor, truth_raw: &Tensor) -> Metrics {
    metrics(&model.norm.normalize(pred_raw), &model.norm.normalize(truth_raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderVariant, ModelConfig};
    use crate::systems::{integrate, NormStats, OdeSystem};

    fn tiny_model() -> KalikoModel {
        let mut model = KalikoModel::new(
            ModelConfig {
                n: 2,
                n_d: 2,
                ell: 4,
                c: 2,
                hidden: 8,
                decoder: DecoderVariant::Conv,
                fixed_prior: false,
            },
            21,
        );
        model.norm = NormStats { mean: vec![0.1, -0.2], std: vec![1.3, 0.8] };
        model
    }

    fn context() -> Tensor {
        integrate(&OdeSystem::VanDerPol, &[1.0, 0.4], 0.05, 23).unwrap()
    }

    #[test]
    fn zero_horizon_yields_empty_prediction() {
        let model = tiny_model();
        let out = predict(&model, &context(), 0).unwrap();
        assert_eq!(out.predicted.rows(), 0);
        assert!(out.rollout_cov_trace.is_empty());
        assert!(out.reconstruction.rows() > 0, "reconstruction still produced");
    }

    #[test]
    fn shapes_and_finiteness() {
        let model = tiny_model();
        let ctx = context(); // 24 raw states → 12 chunks → 11 windows
        let out = predict(&model, &ctx, 10).unwrap();
        assert_eq!(out.predicted.shape(), &[10, 2]);
        assert!(out.predicted.all_finite());
        // Context coverage: (11 − 1 + 2) · 2 = 24 rows.
        assert_eq!(out.reconstruction.shape(), &[24, 2]);
        assert!(out.reconstruction.all_finite());
        assert_eq!(out.rollout_cov_trace.len(), 5);
    }

    #[test]
    fn longer_horizon_extends_the_same_prediction() {
        // Overlap averaging makes the final n_d − 1 chunks of a prediction
        // provisional (a longer rollout adds windows that cover them), but
        // everything before that must be bit-identical.
        let model = tiny_model();
        let ctx = context();
        let short = predict(&model, &ctx, 12).unwrap(); // 6 windows
        let long = predict(&model, &ctx, 20).unwrap(); // 10 windows
        let stable = (6 - model.config.n_d) * model.config.c; // 8 rows
        for r in 0..stable {
            for d in 0..2 {
                assert_eq!(
                    short.predicted.get2(r, d).to_bits(),
                    long.predicted.get2(r, d).to_bits(),
                    "row {r} dim {d}"
                );
            }
        }
        // And the provisional tail really is refined by the extra windows.
        let last = 11;
        assert_ne!(
            short.predicted.get2(last, 0).to_bits(),
            long.predicted.get2(last, 0).to_bits()
        );
    }

    #[test]
    fn odd_horizon_not_divisible_by_chunk() {
        let model = tiny_model();
        let out = predict(&model, &context(), 7).unwrap();
        assert_eq!(out.predicted.shape(), &[7, 2]);
        assert_eq!(out.rollout_cov_trace.len(), 4); // ceil(7/2)
    }

    #[test]
    fn rollout_uncertainty_never_collapses() {
        // Q has a 1e-8 diagonal floor, so every open-loop covariance does too.
        let model = tiny_model();
        let out = predict(&model, &context(), 20).unwrap();
        let m = model.config.latent_dim() as f64;
        for (k, tr) in out.rollout_cov_trace.iter().enumerate() {
            assert!(*tr >= m * 1e-8 * 0.999, "step {k}: trace {tr:e}");
        }
    }

    #[test]
    fn short_context_is_rejected() {
        let model = tiny_model();
        let ctx = Tensor::zeros(&[3, 2]); // needs n_d·c = 4
        match predict(&model, &ctx, 4) {
            Err(InferenceError::ContextTooShort { got: 3, needed: 4 }) => {}
            other => panic!("expected ContextTooShort, got {:?}", other.err()),
        }
    }

    #[test]
    fn metric_arithmetic() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(&[2, 2], vec![1.5, 2.0, 2.0, 4.0]);
        let m = metrics(&a, &b);
        assert!((m.mse - (0.25 + 1.0) / 4.0).abs() < 1e-15);
        assert!((m.mae - (0.5 + 1.0) / 4.0).abs() < 1e-15);
        let zero = metrics(&a, &a);
        assert_eq!(zero.mse, 0.0);
        assert_eq!(zero.mae, 0.0);
    }

    #[test]
    fn normalized_metrics_remove_scale() {
        let model = tiny_model();
        // An error of exactly one std in each dimension → normalized MAE 1.
        let truth = Tensor::new(&[1, 2], vec![0.5, 0.5]);
        let pred = Tensor::new(&[1, 2], vec![0.5 + 1.3, 0.5 + 0.8]);
        let m = normalized_metrics(&model, &pred, &truth);
        assert!((m.mae - 1.0).abs() < 1e-12);
        assert!((m.mse - 1.0).abs() < 1e-12);
    }
}
