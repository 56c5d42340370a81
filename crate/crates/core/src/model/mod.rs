//! The learned model: block-companion latent dynamics, a decoder network
//! acting as the measurement map, learned Gaussian noise terms, and the
//! binary checkpoint format.
//!
//! The latent state stacks `n_d` delay blocks of width `ell` (oldest first),
//! so the transition matrix is a block companion: identity blocks on the
//! superdiagonal shift history up, and one learnable (ell × m) block row
//! writes the newest block. Only that row is stored or trained; the filter
//! and smoother go through sparse shift-aware kernels instead of a dense A.

mod chunk;
mod decoder;

pub use chunk::ChunkSpec;
pub use decoder::BoundDecoder;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::kalman::{GaussianBelief, TransitionModel};
use crate::systems::NormStats;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

/// Mixer blocks in the decoder.
const DEC_BLOCKS: usize = 2;
/// Jitter added to every learned covariance diagonal.
const COV_EPS: f64 = 1e-8;
const CKPT_MAGIC: &[u8; 4] = b"KLKO";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint trailer: {0}")]
    Trailer(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    /// Per-slot channel mixing followed by a shared slot MLP, twice.
    Conv,
    /// The same stack with the mixing layers removed.
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Raw state dimension.
    pub n: usize,
    /// Delay blocks in the latent stack.
    pub n_d: usize,
    /// Latent width per delay block.
    pub ell: usize,
    /// Raw states per measurement chunk.
    pub c: usize,
    /// Decoder MLP hidden width.
    pub hidden: usize,
    pub decoder: DecoderVariant,
    /// Freeze the latent prior at N(0, I) instead of learning it.
    pub fixed_prior: bool,
}

impl ModelConfig {
    pub fn defaults(n: usize) -> Self {
        ModelConfig {
            n,
            n_d: 4,
            ell: 16,
            c: 4,
            hidden: 64,
            decoder: DecoderVariant::Conv,
            fixed_prior: false,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.n_d * self.ell
    }

    /// Measurement dimension: one window of n_d chunks, c raw states each.
    pub fn obs_dim(&self) -> usize {
        self.n_d * self.c * self.n
    }

    pub fn chunk_spec(&self) -> ChunkSpec {
        ChunkSpec { c: self.c, n_d: self.n_d, n: self.n }
    }
}

/// Dense (m, m) transition matrix for the given block row — used by the
/// spectral analysis, never by the filter.
pub fn materialize_transition(blocks: &Tensor) -> Tensor {
    let (l, m) = (blocks.rows(), blocks.cols());
    let mut a = Tensor::zeros(&[m, m]);
    for i in 0..m - l {
        a.set2(i, i + l, 1.0);
    }
    for j in 0..l {
        for i in 0..m {
            a.set2(m - l + j, i, blocks.get2(j, i));
        }
    }
    a
}

/// Block-companion transition bound to a tape.
pub struct CompanionDynamics {
    pub blocks: Var,
    pub q: Var,
}

impl TransitionModel for CompanionDynamics {
    fn left_mul(&self, tape: &mut Tape, m: Var) -> Var {
        tape.companion_left_mul(self.blocks, m)
    }

    fn advance_mean(&self, tape: &mut Tape, mean: Var) -> Var {
        tape.companion_matvec(self.blocks, mean)
    }

    fn process_noise(&self, _tape: &mut Tape) -> Var {
        self.q
    }
}

/// Parameter ids in insertion order; the checkpoint writes tensors in this
/// same order, so ids stay stable across save/load.
pub struct KalikoModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub norm: NormStats,
    /// Completed optimizer steps (advanced by training, kept for resume).
    pub step: u64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor {
    let len: usize = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-a..a)).collect())
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, &[rows, cols], a)
}

impl KalikoModel {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = config.latent_dim();
        let ell = config.ell;
        let cn = config.c * config.n;

        // Newest delay block starts as a 0.99-contraction of itself; the
        // older blocks contribute nothing until training says otherwise.
        let mut blocks = Tensor::zeros(&[ell, m]);
        for i in 0..ell {
            blocks.set2(i, (config.n_d - 1) * ell + i, 0.99);
        }
        store.insert("blocks", blocks);

        for b in 0..DEC_BLOCKS {
            if config.decoder == DecoderVariant::Conv {
                let mut mix = Tensor::zeros(&[ell, config.n_d, config.n_d]);
                for s in 0..ell {
                    for i in 0..config.n_d {
                        let base = (s * config.n_d + i) * config.n_d;
                        for j in 0..config.n_d {
                            mix.data_mut()[base + j] =
                                if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.02..0.02);
                        }
                    }
                }
                store.insert(&format!("mix{b}"), mix);
            }
            store.insert(&format!("w1_{b}"), xavier(&mut rng, config.hidden, ell));
            store.insert(&format!("b1_{b}"), Tensor::zeros(&[config.hidden, 1]));
            store.insert(&format!("w2_{b}"), xavier(&mut rng, ell, config.hidden));
            store.insert(&format!("b2_{b}"), Tensor::zeros(&[ell, 1]));
        }
        store.insert("w_out", xavier(&mut rng, cn, ell));
        store.insert("b_out", Tensor::zeros(&[cn, 1]));

        let log_init = (1e-2f64).ln();
        store.insert("log_q", Tensor::filled(&[m], log_init));
        store.insert("log_r", Tensor::filled(&[config.obs_dim()], log_init));
        store.insert("mu0", Tensor::zeros(&[m, 1]));
        store.insert("log_s0", Tensor::filled(&[m], log_init));

        KalikoModel { config, store, norm: NormStats::identity(config.n), step: 0 }
    }

    fn id(&self, name: &str) -> ParamId {
        self.store.id_by_name(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Dense transition matrix assembled from the learned companion blocks.
    pub fn transition_matrix(&self) -> Tensor {
        materialize_transition(self.store.value(self.id("blocks")))
    }

    /// Creates tape variables for every parameter and assembles the bound
    /// transition, decoder and prior.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        bind_with(&self.config, &self.store, tape)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let tensors: Vec<_> = self.store.params().collect();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (_, p) in &tensors {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(p.value.rank() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let trailer = Trailer {
            n: self.config.n,
            n_d: self.config.n_d,
            ell: self.config.ell,
            c: self.config.c,
            hidden: self.config.hidden,
            decoder_variant: self.config.decoder,
            fixed_prior: self.config.fixed_prior,
            step: self.step,
            norm_mean: self.norm.mean.clone(),
            norm_std: self.norm.std.clone(),
        };
        out.extend_from_slice(serde_json::to_string(&trailer)?.as_bytes());
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<KalikoModel, ModelError> {
        let buf = fs::read(path)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, k: usize| -> Result<&[u8], ModelError> {
            if *pos + k > buf.len() {
                return Err(ModelError::Format(format!("truncated at byte {pos:?}")));
            }
            let s = &buf[*pos..*pos + k];
            *pos += k;
            Ok(s)
        };

        if take(&mut pos, 4)? != CKPT_MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|e| ModelError::Format(e.to_string()))?;
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let len: usize = shape.iter().product();
            let bytes = take(&mut pos, len * 8)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(&name, Tensor::new(&shape, data));
        }

        let trailer: Trailer = serde_json::from_slice(&buf[pos..])?;
        let config = ModelConfig {
            n: trailer.n,
            n_d: trailer.n_d,
            ell: trailer.ell,
            c: trailer.c,
            hidden: trailer.hidden,
            decoder: trailer.decoder_variant,
            fixed_prior: trailer.fixed_prior,
        };
        Ok(KalikoModel {
            config,
            store,
            norm: NormStats { mean: trailer.norm_mean, std: trailer.norm_std },
            step: trailer.step,
        })
    }
}

/// Binds a parameter store with the model's layout onto a tape. Split from
/// [`KalikoModel::bind`] so alternative stores (e.g. perturbed copies in
/// gradient checks) can drive the same graph construction.
pub fn bind_with(cfg: &ModelConfig, store: &ParamStore, tape: &mut Tape) -> BoundModel {
    let m = cfg.latent_dim();
    let id = |name: &str| store.id_by_name(name).unwrap_or_else(|| panic!("missing parameter {name}"));

    let blocks = tape.param(store, id("blocks"));
    let q = diag_plus_eps(tape, store, id("log_q"), COV_EPS);
    let dynamics = CompanionDynamics { blocks, q };

    let mut mixes = Vec::new();
    let mut w1 = Vec::new();
    let mut b1 = Vec::new();
    let mut w2 = Vec::new();
    let mut b2 = Vec::new();
    for b in 0..DEC_BLOCKS {
        if cfg.decoder == DecoderVariant::Conv {
            mixes.push(tape.param(store, id(&format!("mix{b}"))));
        }
        w1.push(tape.param(store, id(&format!("w1_{b}"))));
        b1.push(tape.param(store, id(&format!("b1_{b}"))));
        w2.push(tape.param(store, id(&format!("w2_{b}"))));
        b2.push(tape.param(store, id(&format!("b2_{b}"))));
    }
    let w_out = tape.param(store, id("w_out"));
    let b_out = tape.param(store, id("b_out"));
    let r = diag_plus_eps(tape, store, id("log_r"), COV_EPS);
    let decoder = BoundDecoder {
        variant: cfg.decoder,
        ell: cfg.ell,
        n_d: cfg.n_d,
        chunk_dim: cfg.c * cfg.n,
        hidden: cfg.hidden,
        latent_dim: m,
        mixes,
        w1,
        b1,
        w2,
        b2,
        w_out,
        b_out,
        r,
    };

    let prior = if cfg.fixed_prior {
        GaussianBelief {
            mean: tape.constant(Tensor::zeros(&[m, 1])),
            cov: tape.constant(Tensor::eye(m)),
        }
    } else {
        GaussianBelief {
            mean: tape.param(store, id("mu0")),
            cov: diag_plus_eps(tape, store, id("log_s0"), COV_EPS),
        }
    };

    BoundModel { dynamics, decoder, prior }
}

fn diag_plus_eps(tape: &mut Tape, store: &ParamStore, id: ParamId, eps: f64) -> Var {
    let log_v = tape.param(store, id);
    let e = tape.exp(log_v);
    let d = tape.diag(e);
    let n = tape.shape(d)[0];
    let i = tape.eye(n);
    let ie = tape.scale(i, eps);
    tape.add(d, ie)
}

pub struct BoundModel {
    pub dynamics: CompanionDynamics,
    pub decoder: BoundDecoder,
    pub prior: GaussianBelief,
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    n: usize,
    n_d: usize,
    ell: usize,
    c: usize,
    hidden: usize,
    decoder_variant: DecoderVariant,
    fixed_prior: bool,
    step: u64,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
}
