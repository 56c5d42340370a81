//! Shared fixtures for the benchmarks: a desk-sized model and measurement
//! windows drawn from a short integrated trajectory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kaliko_core::systems::{integrate, NormStats, OdeSystem};
use kaliko_core::{DecoderVariant, KalikoModel, ModelConfig, Tensor};

pub fn desk_model() -> KalikoModel {
    let mut model = KalikoModel::new(ModelConfig::defaults(2), 0);
    model.norm = NormStats::identity(2);
    model
}

pub fn small_model() -> KalikoModel {
    let config = ModelConfig {
        n: 2,
        n_d: 2,
        ell: 8,
        c: 2,
        hidden: 16,
        decoder: DecoderVariant::Conv,
        fixed_prior: false,
    };
    let mut model = KalikoModel::new(config, 0);
    model.norm = NormStats::identity(2);
    model
}

/// `count` consecutive measurement windows from a Van der Pol trajectory.
pub fn windows(model: &KalikoModel, count: usize) -> Vec<Tensor> {
    let spec = model.config.chunk_spec();
    let steps = (count + model.config.n_d) * model.config.c + 1;
    let states = integrate(&OdeSystem::VanDerPol, &[1.5, 0.0], 0.05, steps).expect("bounded");
    (0..count).map(|t| spec.window_at_raw(&states, t * spec.c)).collect()
}

/// Random latent column and a materialized copy of the model's transition.
pub fn latent_and_dense(model: &KalikoModel, seed: u64) -> (Tensor, Tensor) {
    let m = model.config.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::new(&[m, 1], (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect());
    (z, model.transition_matrix())
}

/// The learnable bottom block row, recovered from the dense transition
/// (its upper rows are the fixed shift).
pub fn bottom_blocks(model: &KalikoModel) -> Tensor {
    let a = model.transition_matrix();
    let m = model.config.latent_dim();
    let ell = model.config.ell;
    let mut data = Vec::with_capacity(ell * m);
    for r in m - ell..m {
        data.extend_from_slice(a.row(r));
    }
    Tensor::new(&[ell, m], data)
}
