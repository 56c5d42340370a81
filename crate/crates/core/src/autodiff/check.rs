//! Central-difference gradient verification. Every backward rule in this
//! crate is validated against this oracle, which never touches the backward
//! code path: it only rebuilds the forward graph at perturbed parameters.

use super::{AutodiffError, ParamId, ParamStore, Tape, Var};

/// Compares the analytic gradient of a scalar-valued graph against central
/// finite differences, perturbing every entry of every listed parameter.
///
/// Returns the maximum elementwise relative error, with the denominator
/// max(|analytic|, |numeric|, 1e-8). `h` must lie in [1e-7, 1e-4].
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    build: F,
) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    assert!((1e-7..=1e-4).contains(&h), "step size {h} outside [1e-7, 1e-4]");

    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    let grads = tape.backward(loss, store)?;

    let eval = |store: &ParamStore| -> f64 {
        let mut t = Tape::new();
        let v = build(&mut t, store);
        t.value(v).item()
    };

    let mut max_rel: f64 = 0.0;
    for &id in ids {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let fp = eval(store);
            store.value_mut(id).data_mut()[k] = orig - h;
            let fm = eval(store);
            store.value_mut(id).data_mut()[k] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[k]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
