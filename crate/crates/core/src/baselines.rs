//! Linear baseline: dynamic mode decomposition on delay-stacked states.
//! One ridge-regularized least-squares solve gives a linear operator on the
//! delay space; prediction iterates that operator from the context's last
//! delay vector.

use crate::linalg::{self, LinalgError};
use crate::tensor::{matmul, matmul_nt, Tensor};
use thiserror::Error;

pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("delay stacking needs at least {needed} states (two transitions over a stack of {stack}), got {got}")]
    DataTooShort { needed: usize, stack: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone)]
pub struct DmdModel {
    /// (d, d) operator on delay vectors, d = n·stack.
    pub a: Tensor,
    pub stack: usize,
    pub n: usize,
    pub ridge: f64,
}

/// Delay-embeds a (T, n) trajectory: column j stacks states j..j+stack,
/// oldest on top, giving an (n·stack, T − stack + 1) matrix.
pub fn hankel(states: &Tensor, stack: usize) -> Tensor {
    let (t, n) = (states.rows(), states.cols());
    assert!(stack >= 1 && t >= stack, "stack {stack} over {t} states");
    let cols = t - stack + 1;
    let d = n * stack;
    let mut h = Tensor::zeros(&[d, cols]);
    for j in 0..cols {
        for s in 0..stack {
            for k in 0..n {
                h.set2(s * n + k, j, states.get2(j + s, k));
            }
        }
    }
    h
}

/// Fits the delay-space operator over one or more trajectories by
/// accumulating the normal equations: A = (Y Xᵀ)(X Xᵀ + ridge·I)⁻¹.
pub fn dmd_fit(trajectories: &[&Tensor], stack: usize, ridge: f64) -> Result<DmdModel, BaselineError> {
    let n = trajectories.first().map(|s| s.cols()).unwrap_or(0);
    let d = n * stack;
    let mut xxt = Tensor::zeros(&[d, d]);
    let mut xyt = Tensor::zeros(&[d, d]);
    let mut used = false;
    let mut longest = 0usize;
    for states in trajectories {
        longest = longest.max(states.rows());
        if states.rows() < stack + 2 {
            continue;
        }
        let h = hankel(states, stack);
        let cols = h.cols();
        // X = columns 0..cols−1, Y = columns 1..cols.
        let mut x = Tensor::zeros(&[d, cols - 1]);
        let mut y = Tensor::zeros(&[d, cols - 1]);
        for j in 0..cols - 1 {
            for i in 0..d {
                x.set2(i, j, h.get2(i, j));
                y.set2(i, j, h.get2(i, j + 1));
            }
        }
        xxt.add_in_place(&matmul_nt(&x, &x));
        xyt.add_in_place(&matmul_nt(&x, &y));
        used = true;
    }
    if !used {
        return Err(BaselineError::DataTooShort { needed: stack + 2, stack, got: longest });
    }
    for i in 0..d {
        xxt.set2(i, i, xxt.get2(i, i) + ridge);
    }
    // Solve (XXᵀ + λI) Z = X Yᵀ, then A = Zᵀ.
    let chol = linalg::cholesky(&xxt)?;
    let z = linalg::cholesky_solve(&chol, &xyt);
    Ok(DmdModel { a: z.transposed(), stack, n, ridge })
}

impl DmdModel {
    pub fn delay_dim(&self) -> usize {
        self.n * self.stack
    }

    /// Mean squared one-step residual ‖Y − A X‖²_F / cols plus the ridge
    /// penalty — the objective the fit minimizes.
    pub fn objective(&self, states: &Tensor) -> f64 {
        self.objective_with(states, &self.a)
    }

    pub fn objective_with(&self, states: &Tensor, a: &Tensor) -> f64 {
        let h = hankel(states, self.stack);
        let d = self.delay_dim();
        let cols = h.cols() - 1;
        let mut se = 0.0;
        for j in 0..cols {
            for i in 0..d {
                let mut pred = 0.0;
                for k in 0..d {
                    pred += a.get2(i, k) * h.get2(k, j);
                }
                let r = h.get2(i, j + 1) - pred;
                se += r * r;
            }
        }
        let penalty: f64 = a.data().iter().map(|v| v * v).sum();
        se + self.ridge * penalty
    }

    /// Predicts `horizon` states past the end of `context` by iterating the
    /// delay operator and reading the newest block each step.
    pub fn predict(&self, context: &Tensor, horizon: usize) -> Tensor {
        let (t, n) = (context.rows(), context.cols());
        assert_eq!(n, self.n);
        assert!(t >= self.stack, "context shorter than the delay stack");
        let mut v = Tensor::zeros(&[self.delay_dim(), 1]);
        for s in 0..self.stack {
            for k in 0..n {
                v.data_mut()[s * n + k] = context.get2(t - self.stack + s, k);
            }
        }
        let mut out = Tensor::zeros(&[horizon, n]);
        for step in 0..horizon {
            v = matmul(&self.a, &v);
            let newest = &v.data()[(self.stack - 1) * n..];
            for k in 0..n {
                out.set2(step, k, newest[k]);
            }
        }
        out
    }
}
