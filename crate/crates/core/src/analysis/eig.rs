//! Dense nonsymmetric eigendecomposition. Eigenvalues come from the real
//! Schur form; eigenvectors are recovered per eigenvalue by shifted inverse
//! iteration on a pivot-floored complex LU, then verified against residual
//! bounds. Left vectors are scaled to the biorthogonal normalization wᴴv = 1
//! whenever the pair is not defective.

use std::io;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

/// Residual bound relative to ‖A‖_F: every returned pair satisfies
/// ‖Av − λv‖ ≤ RESIDUAL_REL·‖A‖ and ‖Aᵀw − λ̄w‖ ≤ RESIDUAL_REL·‖A‖ with
/// unit-norm vectors (the left bound is checked before rescaling).
pub const RESIDUAL_REL: f64 = 1e-8;

const ITER_CAP: usize = 60;
const RESTARTS: usize = 4;

#[derive(Debug, Error)]
pub enum EigError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("Schur iteration did not converge")]
    SchurFailed,
    #[error("inverse iteration stalled at residual {best:e} (target {target:e}) for λ = {re}{im:+}i")]
    NonConvergence { re: f64, im: f64, best: f64, target: f64 },
}

#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: Complex64,
    /// Right eigenvector, unit 2-norm, largest component rotated to the
    /// positive real axis.
    pub right: Vec<Complex64>,
    /// Left eigenvector; scaled so wᴴv = 1, or kept at unit norm when the
    /// pair is defective (|wᴴv| below 1e-10).
    pub left: Vec<Complex64>,
}

impl EigenPair {
    pub fn dim(&self) -> usize {
        self.right.len()
    }

    /// wᴴv — exactly 1 for non-defective pairs, tiny for defective ones.
    pub fn biorthogonal_product(&self) -> Complex64 {
        hdot(&self.left, &self.right)
    }

    /// Eigenfunction value of a real latent vector: φ(z) = wᴴ z.
    pub fn eigenfunction(&self, z: &Tensor) -> Complex64 {
        debug_assert_eq!(z.len(), self.left.len());
        self.left.iter().zip(z.data()).map(|(w, &x)| w.conj() * x).sum()
    }

    /// Conjugate pair (λ̄, v̄, w̄) — also an eigenpair of the real matrix.
    pub fn conjugate(&self) -> EigenPair {
        EigenPair {
            value: self.value.conj(),
            right: self.right.iter().map(|z| z.conj()).collect(),
            left: self.left.iter().map(|z| z.conj()).collect(),
        }
    }
}

pub(crate) fn hdot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm2(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// (A v)_i for a real row-major matrix and a complex vector.
fn real_matvec(a: &Tensor, v: &[Complex64]) -> Vec<Complex64> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let row = a.row(i);
            row.iter().zip(v).map(|(&r, z)| z * r).sum()
        })
        .collect()
}

/// ‖Av − λv‖₂ for a unit-norm v.
fn residual(a: &Tensor, lambda: Complex64, v: &[Complex64]) -> f64 {
    let av = real_matvec(a, v);
    av.iter().zip(v).map(|(y, x)| (y - lambda * x).norm_sqr()).sum::<f64>().sqrt()
}

/// Rotate so the largest-magnitude component is real and positive; makes the
/// returned vectors deterministic up to iteration noise.
fn fix_phase(v: &mut [Complex64]) {
    let mut best = 0;
    for (i, z) in v.iter().enumerate() {
        if z.norm_sqr() > v[best].norm_sqr() {
            best = i;
        }
    }
    let mag = v[best].norm();
    if mag > 0.0 {
        let rot = v[best].conj() / mag;
        for z in v.iter_mut() {
            *z *= rot;
        }
    }
}

/// Partial-pivoted LU of a dense complex matrix. Pivots smaller than `floor`
/// are replaced by it: inverse iteration factors (A − λI) at an eigenvalue,
/// where the blow-up of the floored solve is exactly the point.
struct ComplexLu {
    n: usize,
    lu: Vec<Complex64>,
    piv: Vec<usize>,
}

impl ComplexLu {
    fn factor(mut lu: Vec<Complex64>, n: usize, floor: f64) -> ComplexLu {
        let mut piv = vec![0usize; n];
        for k in 0..n {
            let mut p = k;
            for i in k + 1..n {
                if lu[i * n + k].norm_sqr() > lu[p * n + k].norm_sqr() {
                    p = i;
                }
            }
            piv[k] = p;
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
            }
            if lu[k * n + k].norm() < floor {
                lu[k * n + k] = Complex64::new(floor, 0.0);
            }
            let d = lu[k * n + k];
            for i in k + 1..n {
                let l = lu[i * n + k] / d;
                lu[i * n + k] = l;
                for j in k + 1..n {
                    let upper = lu[k * n + j];
                    lu[i * n + j] -= l * upper;
                }
            }
        }
        ComplexLu { n, lu, piv }
    }

    fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        let n = self.n;
        let mut x = b.to_vec();
        for k in 0..n {
            x.swap(k, self.piv[k]);
            let xk = x[k];
            for i in k + 1..n {
                x[i] -= self.lu[i * n + k] * xk;
            }
        }
        for k in (0..n).rev() {
            let mut s = x[k];
            for j in k + 1..n {
                s -= self.lu[k * n + j] * x[j];
            }
            x[k] = s / self.lu[k * n + k];
        }
        x
    }
}

/// Unit eigenvector of `a` for the (Schur-accurate) eigenvalue `lambda`.
fn inverse_iteration(
    a: &Tensor,
    lambda: Complex64,
    scale: f64,
    salt: u64,
) -> Result<Vec<Complex64>, EigError> {
    let n = a.rows();
    let target = RESIDUAL_REL * scale;
    let floor = scale * f64::EPSILON * n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(salt);
    let mut best: Option<(f64, Vec<Complex64>)> = None;

    for attempt in 0..RESTARTS {
        // A tiny shift offset keeps repeated factorizations from landing on
        // the identical floored pivot pattern across restarts.
        let off = scale * 1e-13 * attempt as f64;
        let sigma = lambda + Complex64::new(off, off * 0.5);
        let mut m = vec![Complex64::new(0.0, 0.0); n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = Complex64::new(a.get2(i, j), 0.0) - if i == j { sigma } else { Complex64::new(0.0, 0.0) };
            }
        }
        let lu = ComplexLu::factor(m, n, floor.max(f64::MIN_POSITIVE));

        let mut v: Vec<Complex64> = (0..n)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let nv = norm2(&v);
        for z in v.iter_mut() {
            *z /= nv;
        }

        for _ in 0..ITER_CAP {
            let mut next = lu.solve(&v);
            let nn = norm2(&next);
            if !nn.is_finite() || nn == 0.0 {
                break;
            }
            for z in next.iter_mut() {
                *z /= nn;
            }
            v = next;
            let r = residual(a, lambda, &v);
            if best.as_ref().map_or(true, |(b, _)| r < *b) {
                best = Some((r, v.clone()));
            }
            if r <= scale * 1e-12 {
                let mut out = v;
                fix_phase(&mut out);
                return Ok(out);
            }
        }
        if let Some((r, ref bv)) = best {
            if r <= target {
                let mut out = bv.clone();
                fix_phase(&mut out);
                return Ok(out);
            }
        }
    }

    let best_r = best.map_or(f64::INFINITY, |(r, _)| r);
    Err(EigError::NonConvergence { re: lambda.re, im: lambda.im, best: best_r, target })
}

/// Full spectrum of a square real matrix, sorted by descending |λ| (ties by
/// descending real then imaginary part), every pair residual-verified.
pub fn eig(a: &Tensor) -> Result<Vec<EigenPair>, EigError> {
    let (rows, cols) = (a.rows(), a.cols());
    if rows != cols {
        return Err(EigError::NotSquare { rows, cols });
    }
    let n = rows;
    let scale = a.frob_norm().max(f64::MIN_POSITIVE);

    let na = DMatrix::from_fn(n, n, |i, j| a.get2(i, j));
    let schur = nalgebra::linalg::Schur::try_new(na, f64::EPSILON, 100 * n.max(10))
        .ok_or(EigError::SchurFailed)?;
    let mut values: Vec<Complex64> =
        schur.complex_eigenvalues().iter().map(|z| Complex64::new(z.re, z.im)).collect();
    values.sort_by(|p, q| {
        (q.norm(), q.re, q.im)
            .partial_cmp(&(p.norm(), p.re, p.im))
            .expect("eigenvalues are finite")
    });

    let at = a.transposed();
    let mut pairs = Vec::with_capacity(n);
    for (k, &lambda) in values.iter().enumerate() {
        let salt = 0x5EED ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let right = inverse_iteration(a, lambda, scale, salt)?;
        let mut left = inverse_iteration(&at, lambda.conj(), scale, salt ^ 0xAAAA_AAAA)?;
        let s = hdot(&left, &right);
        if s.norm() >= 1e-10 {
            let c = s.conj();
            for z in left.iter_mut() {
                *z /= c;
            }
        }
        pairs.push(EigenPair { value: lambda, right, left });
    }
    Ok(pairs)
}

/// Spectrum table: `idx,re,im,abs`, one row per pair in the given order.
pub fn write_spectrum_csv(pairs: &[EigenPair], w: &mut impl io::Write) -> io::Result<()> {
    writeln!(w, "idx,re,im,abs")?;
    for (i, p) in pairs.iter().enumerate() {
        writeln!(w, "{},{:.16e},{:.16e},{:.16e}", i, p.value.re, p.value.im, p.value.norm())?;
    }
    Ok(())
}
