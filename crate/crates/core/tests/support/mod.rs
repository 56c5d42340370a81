//! Shared fixtures for integration tests: an independent dense Kalman
//! filter/smoother written directly against nalgebra (explicit LU inverses,
//! no shared code with the library's tape implementation), random
//! linear-Gaussian instances, and the agreement harness comparing the two.

use kaliko_core::autodiff::Tape;
use kaliko_core::kalman::{self, DenseTransition, GaussianBelief, LinearMeasurement};
use kaliko_core::tensor::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct LinearGaussian {
    pub a: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub mu0: DVector<f64>,
    pub p0: DMatrix<f64>,
    pub ys: Vec<DVector<f64>>,
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> LinearGaussian {
    let m = rng.gen_range(1..=4usize);
    let p = rng.gen_range(1..=3usize);
    let t_len = rng.gen_range(1..=20usize);
    let spd = |rng: &mut ChaCha8Rng, n: usize| -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &g * g.transpose() + DMatrix::identity(n, n) * 0.1
    };
    LinearGaussian {
        a: DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0) * 0.9 / m as f64),
        h: DMatrix::from_fn(p, m, |_, _| rng.gen_range(-1.0..1.0)),
        q: spd(rng, m),
        r: spd(rng, p),
        mu0: DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0)),
        p0: spd(rng, m),
        ys: (0..t_len)
            .map(|_| DVector::from_fn(p, |_, _| rng.gen_range(-2.0..2.0)))
            .collect(),
    }
}

pub struct OracleRun {
    /// (mean, cov) after each measurement, t = 1..=T.
    pub filtered: Vec<(DVector<f64>, DMatrix<f64>)>,
    /// (mean, cov) before each measurement, t = 1..=T.
    pub predicted: Vec<(DVector<f64>, DMatrix<f64>)>,
    /// (mean, cov) at t = 0..=T after the backward pass.
    pub smoothed: Vec<(DVector<f64>, DMatrix<f64>)>,
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// Textbook filter + RTS smoother with explicit inverses.
pub fn oracle_filter_smooth(inst: &LinearGaussian) -> OracleRun {
    let mut mu = inst.mu0.clone();
    let mut p = inst.p0.clone();
    let mut filtered = Vec::new();
    let mut predicted = Vec::new();
    for y in &inst.ys {
        let mu_pred = &inst.a * &mu;
        let p_pred = sym(&inst.a * &p * inst.a.transpose() + &inst.q);
        let s = sym(&inst.h * &p_pred * inst.h.transpose() + &inst.r);
        let s_inv = s.try_inverse().expect("oracle innovation covariance");
        let k = &p_pred * inst.h.transpose() * s_inv;
        mu = &mu_pred + &k * (y - &inst.h * &mu_pred);
        let eye = DMatrix::identity(mu.len(), mu.len());
        p = sym((eye - &k * &inst.h) * &p_pred);
        predicted.push((mu_pred, p_pred));
        filtered.push((mu.clone(), p.clone()));
    }

    let t_len = inst.ys.len();
    let mut smoothed = vec![filtered[t_len - 1].clone(); t_len + 1];
    for t in (0..t_len).rev() {
        let (mu_f, p_f) = if t == 0 {
            (inst.mu0.clone(), inst.p0.clone())
        } else {
            filtered[t - 1].clone()
        };
        let (mu_pred, p_pred) = &predicted[t];
        let g = &p_f * inst.a.transpose() * p_pred.clone().try_inverse().expect("oracle smoother");
        let mu_s = &mu_f + &g * (&smoothed[t + 1].0 - mu_pred);
        let p_s = sym(&p_f + &g * (&smoothed[t + 1].1 - p_pred) * g.transpose());
        smoothed[t] = (mu_s, p_s);
    }
    OracleRun { filtered, predicted, smoothed }
}

pub fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            data.push(m[(i, j)]);
        }
    }
    Tensor::new(&[m.nrows(), m.ncols()], data)
}

fn vec_to_tensor(v: &DVector<f64>) -> Tensor {
    Tensor::col(v.as_slice())
}

fn max_diff_mat(t: &Tensor, m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            worst = worst.max((t.get2(i, j) - m[(i, j)]).abs());
        }
    }
    worst
}

fn max_diff_vec(t: &Tensor, v: &DVector<f64>) -> f64 {
    t.data()
        .iter()
        .zip(v.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Runs the tape implementation on the same instance and returns the largest
/// absolute discrepancy against the oracle across every predicted, filtered
/// and smoothed moment.
pub fn agreement_with_oracle(inst: &LinearGaussian) -> f64 {
    let oracle = oracle_filter_smooth(inst);

    let mut tape = Tape::new();
    let a = tape.constant(to_tensor(&inst.a));
    let q = tape.constant(to_tensor(&inst.q));
    let h = tape.constant(to_tensor(&inst.h));
    let r = tape.constant(to_tensor(&inst.r));
    let trans = DenseTransition { a, q };
    let meas = LinearMeasurement { h, r };
    let prior = GaussianBelief {
        mean: tape.constant(vec_to_tensor(&inst.mu0)),
        cov: tape.constant(to_tensor(&inst.p0)),
    };
    let ys: Vec<Tensor> = inst.ys.iter().map(vec_to_tensor).collect();
    let steps = kalman::filter(&mut tape, &trans, &meas, &prior, &ys).expect("filter");
    let smoothed = kalman::smooth(&mut tape, &trans, &prior, &steps).expect("smooth");

    let mut worst = 0.0f64;
    for (t, step) in steps.iter().enumerate() {
        worst = worst.max(max_diff_vec(tape.value(step.predicted.mean), &oracle.predicted[t].0));
        worst = worst.max(max_diff_mat(tape.value(step.predicted.cov), &oracle.predicted[t].1));
        worst = worst.max(max_diff_vec(tape.value(step.filtered.mean), &oracle.filtered[t].0));
        worst = worst.max(max_diff_mat(tape.value(step.filtered.cov), &oracle.filtered[t].1));
    }
    for (t, (mu, p)) in oracle.smoothed.iter().enumerate() {
        worst = worst.max(max_diff_vec(tape.value(smoothed[t].mean), mu));
        worst = worst.max(max_diff_mat(tape.value(smoothed[t].cov), p));
    }
    worst
}

/// Worst disagreement over `n` random instances.
pub fn kf_agreement_max_err(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| agreement_with_oracle(&random_instance(&mut rng)))
        .fold(0.0, f64::max)
}
