//! Plain-value dense routines: Cholesky factorization and SPD solves.
//!
//! These back the tape's `linear_solve` op (forward and adjoint) and the
//! ridge-regularized least squares in the DMD baseline.

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    /// A pivot fell below 1e-12 of the largest diagonal entry; the matrix is
    /// numerically singular (or not positive definite).
    #[error("singular matrix: pivot {pivot:.3e} at index {index} (largest diagonal {max_diag:.3e})")]
    SingularMatrix { index: usize, pivot: f64, max_diag: f64 },
}

const PIVOT_RTOL: f64 = 1e-12;

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
/// Only the lower triangle of `a` is read.
pub fn cholesky(a: &Tensor) -> Result<Tensor, LinalgError> {
    assert_eq!(a.rank(), 2);
    let n = a.rows();
    assert_eq!(n, a.cols(), "cholesky needs a square matrix");
    let mut max_diag: f64 = 0.0;
    for i in 0..n {
        max_diag = max_diag.max(a.get2(i, i).abs());
    }
    let floor = PIVOT_RTOL * max_diag.max(f64::MIN_POSITIVE);

    let mut l = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get2(i, j);
            for k in 0..j {
                s -= l.get2(i, k) * l.get2(j, k);
            }
            if i == j {
                if s <= floor {
                    return Err(LinalgError::SingularMatrix { index: i, pivot: s, max_diag });
                }
                l.set2(i, j, s.sqrt());
            } else {
                l.set2(i, j, s / l.get2(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves A·X = B given the Cholesky factor L of A. B may have any number of
/// right-hand-side columns.
pub fn cholesky_solve(l: &Tensor, b: &Tensor) -> Tensor {
    let n = l.rows();
    let (rank1, cols) = match b.rank() {
        1 => (true, 1),
        2 => (false, b.cols()),
        r => panic!("cholesky_solve rhs rank {r}"),
    };
    assert_eq!(b.shape()[0], n, "rhs rows {} vs system size {}", b.shape()[0], n);

    let mut x = b.data().to_vec();
    // L y = b (forward), column-wise over the row-major layout.
    for i in 0..n {
        for k in 0..i {
            let lik = l.get2(i, k);
            if lik == 0.0 {
                continue;
            }
            for c in 0..cols {
                x[i * cols + c] -= lik * x[k * cols + c];
            }
        }
        let d = l.get2(i, i);
        for c in 0..cols {
            x[i * cols + c] /= d;
        }
    }
    // Lᵀ x = y (backward).
    for i in (0..n).rev() {
        let d = l.get2(i, i);
        for c in 0..cols {
            x[i * cols + c] /= d;
        }
        for k in 0..i {
            let lik = l.get2(i, k);
            if lik == 0.0 {
                continue;
            }
            for c in 0..cols {
                x[k * cols + c] -= lik * x[i * cols + c];
            }
        }
    }
    if rank1 {
        Tensor::new(&[n], x)
    } else {
        Tensor::new(&[n, cols], x)
    }
}

/// One-shot SPD solve A·X = B.
pub fn solve_spd(a: &Tensor, b: &Tensor) -> Result<Tensor, LinalgError> {
    let l = cholesky(a)?;
    Ok(cholesky_solve(&l, b))
}

/// Explicit inverse of an SPD matrix (test oracle and small-matrix plumbing).
pub fn inv_spd(a: &Tensor) -> Result<Tensor, LinalgError> {
    let n = a.rows();
    solve_spd(a, &Tensor::eye(n))
}
