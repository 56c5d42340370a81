//! Decoder network: maps a latent column to one measurement window, and
//! optionally carries a forward-mode tangent block through the same layers so
//! the full Jacobian comes out of a single pass. The tangent stays on the
//! tape, so downstream losses can differentiate through the Jacobian itself.

use crate::autodiff::{Tape, Var};
use crate::kalman::MeasurementModel;
use crate::tensor::Tensor;

use super::DecoderVariant;

/// Decoder parameters bound to one tape. The latent column (m, 1) is viewed
/// as an (ell, n_d) sheet — rows are latent slots, columns are delay blocks —
/// processed by [mix → slot MLP] blocks, then read out per delay block and
/// folded back into a (p, 1) window, p = n_d · chunk_dim.
pub struct BoundDecoder {
    pub variant: DecoderVariant,
    pub ell: usize,
    pub n_d: usize,
    pub chunk_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    /// Per-slot (n_d × n_d) mixing kernels, one tensor per block (Conv only).
    pub mixes: Vec<Var>,
    pub w1: Vec<Var>,
    pub b1: Vec<Var>,
    pub w2: Vec<Var>,
    pub b2: Vec<Var>,
    pub w_out: Var,
    pub b_out: Var,
    /// Measurement noise covariance (p, p).
    pub r: Var,
}

impl BoundDecoder {
    pub fn obs_dim(&self) -> usize {
        self.n_d * self.chunk_dim
    }

    pub fn decode(&self, tape: &mut Tape, z: Var) -> Var {
        self.forward(tape, z, false).0
    }

    /// Returns (g(z), ∂g/∂z) with the Jacobian of shape (p, m).
    pub fn decode_with_jacobian(&self, tape: &mut Tape, z: Var) -> (Var, Var) {
        let (y, jac) = self.forward(tape, z, true);
        (y, jac.expect("tangent requested"))
    }

    /// Seed tangent: ∂X[k, i]/∂z[b] = 1 iff b = i·ell + k, since the sheet is
    /// the transposed (n_d, ell) reshape of z.
    fn tangent_seed(&self) -> Tensor {
        let (ell, n_d, m) = (self.ell, self.n_d, self.latent_dim);
        let mut t = Tensor::zeros(&[ell, n_d, m]);
        for k in 0..ell {
            for i in 0..n_d {
                t.data_mut()[(k * n_d + i) * m + i * ell + k] = 1.0;
            }
        }
        t
    }

    fn forward(&self, tape: &mut Tape, z: Var, with_tangent: bool) -> (Var, Option<Var>) {
        let (ell, n_d, m, h) = (self.ell, self.n_d, self.latent_dim, self.hidden);
        debug_assert_eq!(tape.shape(z), &[m, 1]);

        let sheet = tape.reshape(z, &[n_d, ell]);
        let mut x = tape.transpose(sheet);
        let mut tan = if with_tangent {
            let seed = self.tangent_seed();
            Some(tape.constant(seed))
        } else {
            None
        };

        for b in 0..self.w1.len() {
            if self.variant == DecoderVariant::Conv {
                x = tape.depthwise_mix(self.mixes[b], x);
                tan = tan.map(|t| tape.depthwise_mix(self.mixes[b], t));
            }
            let w1x = tape.matmul(self.w1[b], x);
            let pre = tape.add_col(w1x, self.b1[b]);
            x = tape.gelu(pre);
            tan = tan.map(|t| {
                let flat = tape.reshape(t, &[ell, n_d * m]);
                let wt = tape.matmul(self.w1[b], flat);
                let cube = tape.reshape(wt, &[h, n_d, m]);
                let slope = tape.gelu_prime(pre);
                tape.mul_bcast(slope, cube)
            });
            let w2x = tape.matmul(self.w2[b], x);
            x = tape.add_col(w2x, self.b2[b]);
            tan = tan.map(|t| {
                let flat = tape.reshape(t, &[h, n_d * m]);
                let wt = tape.matmul(self.w2[b], flat);
                tape.reshape(wt, &[ell, n_d, m])
            });
        }

        let ry = tape.matmul(self.w_out, x);
        let y = tape.add_col(ry, self.b_out);
        let window = tape.fold_slots(y);
        let jac = tan.map(|t| {
            let flat = tape.reshape(t, &[ell, n_d * m]);
            let wt = tape.matmul(self.w_out, flat);
            let cube = tape.reshape(wt, &[self.chunk_dim, n_d, m]);
            tape.fold_slots(cube)
        });
        (window, jac)
    }
}

impl MeasurementModel for BoundDecoder {
    fn observe(&self, tape: &mut Tape, mean: Var) -> (Var, Var) {
        self.decode_with_jacobian(tape, mean)
    }

    fn noise(&self, _tape: &mut Tape) -> Var {
        self.r
    }
}
