//! Temporal chunking: raw trajectories become overlapping windows of
//! `n_d` chunks × `c` raw states, flattened chunk-major. One filter step
//! consumes one window, and consecutive windows overlap by `n_d − 1` chunks,
//! which is what lets the latent delay stack shift by exactly one chunk per
//! step. `unchunk` inverts the construction by averaging the overlaps.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpec {
    /// Raw states per chunk.
    pub c: usize,
    /// Chunks per window.
    pub n_d: usize,
    /// Raw state dimension.
    pub n: usize,
}

impl ChunkSpec {
    pub fn chunk_dim(&self) -> usize {
        self.c * self.n
    }

    pub fn window_dim(&self) -> usize {
        self.n_d * self.c * self.n
    }

    /// Windows obtainable from `t_raw` states: ⌊t_raw / c⌋ − n_d + 1.
    pub fn n_windows(&self, t_raw: usize) -> usize {
        (t_raw / self.c).saturating_sub(self.n_d - 1)
    }

    /// Raw states covered by `t` consecutive windows.
    pub fn covered(&self, t: usize) -> usize {
        if t == 0 {
            0
        } else {
            (t - 1 + self.n_d) * self.c
        }
    }

    /// Window `t` as a (p, 1) column: raw rows [t·c, t·c + n_d·c) in time
    /// order, each state flattened in place.
    pub fn window(&self, states: &Tensor, t: usize) -> Tensor {
        self.window_at_raw(states, t * self.c)
    }

    /// Same, anchored at an arbitrary raw row (training samples windows at
    /// unaligned offsets; the dynamics have no notion of absolute time).
    pub fn window_at_raw(&self, states: &Tensor, start: usize) -> Tensor {
        assert_eq!(states.cols(), self.n);
        let span = self.n_d * self.c;
        assert!(
            start + span <= states.rows(),
            "window at raw {start} needs rows up to {} of {}",
            start + span,
            states.rows()
        );
        let mut data = Vec::with_capacity(span * self.n);
        for r in start..start + span {
            data.extend_from_slice(states.row(r));
        }
        Tensor::new(&[span * self.n, 1], data)
    }

    pub fn windows(&self, states: &Tensor) -> Vec<Tensor> {
        (0..self.n_windows(states.rows())).map(|t| self.window(states, t)).collect()
    }

    /// Averages overlapping windows back into a raw (T_cov, n) trajectory.
    pub fn unchunk(&self, windows: &[Tensor]) -> Tensor {
        let t_cov = self.covered(windows.len());
        let mut sum = Tensor::zeros(&[t_cov, self.n]);
        let mut count = vec![0u32; t_cov];
        for (t, w) in windows.iter().enumerate() {
            assert_eq!(w.len(), self.window_dim(), "window {t} length");
            for u in 0..self.n_d * self.c {
                let raw = t * self.c + u;
                count[raw] += 1;
                for d in 0..self.n {
                    let v = sum.get2(raw, d) + w.data()[u * self.n + d];
                    sum.set2(raw, d, v);
                }
            }
        }
        for raw in 0..t_cov {
            let k = f64::from(count[raw].max(1));
            for d in 0..self.n {
                let v = sum.get2(raw, d) / k;
                sum.set2(raw, d, v);
            }
        }
        sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize, n: usize) -> Tensor {
        Tensor::new(&[t, n], (0..t * n).map(|v| v as f64).collect())
    }

    #[test]
    fn window_count_and_coverage() {
        // 8 raw states, chunks of 2, windows of 2 chunks: starts 0, 2, 4.
        let spec = ChunkSpec { c: 2, n_d: 2, n: 1 };
        assert_eq!(spec.n_windows(8), 3);
        assert_eq!(spec.covered(3), 8);
        let states = ramp(8, 1);
        let ws = spec.windows(&states);
        assert_eq!(ws.len(), 3);
        assert_eq!(ws[0].data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(ws[1].data(), &[2.0, 3.0, 4.0, 5.0]);
        assert_eq!(ws[2].data(), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn short_series_has_no_windows() {
        let spec = ChunkSpec { c: 4, n_d: 4, n: 2 };
        assert_eq!(spec.n_windows(15), 0);
        assert_eq!(spec.n_windows(16), 1);
        assert_eq!(spec.covered(0), 0);
    }

    #[test]
    fn windows_interleave_state_dims() {
        let spec = ChunkSpec { c: 1, n_d: 2, n: 2 };
        let states = ramp(3, 2); // rows (0,1), (2,3), (4,5)
        let w = spec.window(&states, 1);
        assert_eq!(w.data(), &[2.0, 3.0, 4.0, 5.0]);
        assert_eq!(w.shape(), &[4, 1]);
    }

    #[test]
    fn unchunk_inverts_chunking() {
        let spec = ChunkSpec { c: 2, n_d: 3, n: 2 };
        let states = Tensor::new(
            &[12, 2],
            (0..24).map(|v| (v as f64) * 0.37 - 2.0).collect(),
        );
        let ws = spec.windows(&states);
        let back = spec.unchunk(&ws);
        assert_eq!(back.rows(), spec.covered(ws.len()));
        for r in 0..back.rows() {
            for d in 0..2 {
                let diff = (back.get2(r, d) - states.get2(r, d)).abs();
                assert!(diff < 1e-12, "row {r} dim {d}: {diff:e}");
            }
        }
    }

    #[test]
    fn unchunk_averages_disagreeing_windows() {
        let spec = ChunkSpec { c: 1, n_d: 2, n: 1 };
        // Two windows claiming different values for the shared middle state.
        let w0 = Tensor::col(&[0.0, 1.0]);
        let w1 = Tensor::col(&[3.0, 4.0]);
        let merged = spec.unchunk(&[w0, w1]);
        assert_eq!(merged.data(), &[0.0, 2.0, 4.0]);
    }
}
