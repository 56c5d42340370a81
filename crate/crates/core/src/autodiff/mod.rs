//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every forward op in creation order, which is already a
//! topological order, so the backward pass is a single reverse sweep that
//! visits each node exactly once. Branches whose adjoint stays empty (for
//! example smoothing-covariance recursions that the loss never reads) cost
//! nothing in backward.
//!
//! Parameters live outside the tape in a [`ParamStore`]; binding one onto a
//! tape creates a leaf node. Gradients accumulate (+=) across tape uses, and
//! the caller zeroes them between optimizer steps.

mod check;

pub use check::finite_diff_check;

use crate::linalg::{self, LinalgError};
use crate::tensor::{self, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGrad { param: String },
    #[error(transparent)]
    Singular(#[from] LinalgError),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    /// Dense index into per-parameter side tables (gradients, optimizer
    /// moments). Ids are assigned contiguously in insertion order.
    pub fn index(self) -> usize {
        self.0
    }
}

pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            self.id_by_name(name).is_none(),
            "duplicate parameter name `{name}`"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.to_string(), value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Adds a backward result into the stored gradients (+=).
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, g) in grads.by_param.iter().enumerate() {
            if let Some(g) = g {
                self.params[i].grad.add_in_place(g);
            }
        }
    }

    /// Euclidean norm over all stored gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Gradients produced by one backward pass, indexed by parameter. Parameters
/// the loss never reached have no entry (their gradient is zero).
pub struct Gradients {
    by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn add_in_place(&mut self, other: &Gradients) {
        assert_eq!(self.by_param.len(), other.by_param.len());
        for (a, b) in self.by_param.iter_mut().zip(&other.by_param) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => x.add_in_place(y),
                (None, Some(y)) => *a = Some(y.clone()),
                _ => {}
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.by_param
            .iter()
            .flatten()
            .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.by_param.iter_mut().flatten() {
            g.scale_in_place(k);
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows { src: Var, start: usize },
    Gelu(Var),
    GeluPrime(Var),
    Exp(Var),
    Diag(Var),
    Sum(Var),
    Mse(Var, Var),
    AddCol { x: Var, bias: Var },
    MulBcast { a: Var, t: Var },
    DepthwiseMix { kernels: Var, x: Var },
    FoldSlots(Var),
    CompanionMatVec { blocks: Var, z: Var },
    CompanionLeftMul { blocks: Var, rhs: Var },
    LinearSolve { a: Var, b: Var, chol: Tensor },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Gelu(..) => "gelu",
            Op::GeluPrime(..) => "gelu_prime",
            Op::Exp(..) => "exp",
            Op::Diag(..) => "diag",
            Op::Sum(..) => "sum",
            Op::Mse(..) => "mse",
            Op::AddCol { .. } => "add_col",
            Op::MulBcast { .. } => "mul_bcast",
            Op::DepthwiseMix { .. } => "depthwise_mix",
            Op::FoldSlots(..) => "fold_slots",
            Op::CompanionMatVec { .. } => "companion_matvec",
            Op::CompanionLeftMul { .. } => "companion_left_mul",
            Op::LinearSolve { .. } => "linear_solve",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    poison: Option<&'static str>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The tag of the first op that produced a non-finite value, if any.
    /// Forward passes never panic on NaN/inf; callers that care (the training
    /// loop) check this before trusting the loss.
    pub fn poisoned(&self) -> Option<&'static str> {
        self.poison
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        if self.poison.is_none() && !value.all_finite() {
            self.poison = Some(op.tag());
        }
        self.nodes.push(Node { op, value, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn eye(&mut self, n: usize) -> Var {
        self.constant(Tensor::eye(n))
    }

    /// Binds a parameter's current value onto this tape as a leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(Op::Leaf, store.value(id).clone());
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| k * x);
        self.push(Op::Scale(a, k), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transposed();
        self.push(Op::Transpose(a), v)
    }

    /// (M + Mᵀ)/2 — used after every covariance-producing step.
    pub fn symmetrize(&mut self, a: Var) -> Var {
        let at = self.transpose(a);
        let s = self.add(a, at);
        self.scale(s, 0.5)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).reshaped(shape);
        self.push(Op::Reshape(a), v)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let trailing = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &trailing[..], "concat_rows trailing shape mismatch");
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&trailing);
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::new(&shape, data))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Var {
        let t = self.value(src);
        let total = t.shape()[0];
        assert!(start + len <= total, "slice_rows {start}+{len} out of {total}");
        let rs: usize = t.shape()[1..].iter().product();
        let data = t.data()[start * rs..(start + len) * rs].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&t.shape()[1..]);
        self.push(Op::SliceRows { src, start }, Tensor::new(&shape, data))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::gelu);
        self.push(Op::Gelu(a), v)
    }

    /// Elementwise gelu'(x); its own backward rule uses gelu''.
    pub fn gelu_prime(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::gelu_grad);
        self.push(Op::GeluPrime(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    /// Rank-1 vector (n) → diagonal matrix (n, n).
    pub fn diag(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.rank(), 1, "diag expects a rank-1 vector");
        let n = t.len();
        let mut v = Tensor::zeros(&[n, n]);
        for i in 0..n {
            v.set2(i, i, t.data()[i]);
        }
        self.push(Op::Diag(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Mean squared difference over all elements (scalar output).
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mse shape mismatch");
        let n = ta.len() as f64;
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(Op::Mse(a, b), Tensor::scalar(s / n))
    }

    /// Sum of squared differences (no mean), the raw objective form.
    pub fn sum_sq_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d2 = self.mul(d, d);
        self.sum(d2)
    }

    /// Adds a column-shaped bias (r, 1) to every column of X (r, s).
    pub fn add_col(&mut self, x: Var, bias: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(bias));
        assert_eq!(tx.rank(), 2);
        assert_eq!(tb.shape(), &[tx.shape()[0], 1], "bias shape {:?}", tb.shape());
        let (r, s) = (tx.shape()[0], tx.shape()[1]);
        let mut v = tx.clone();
        for i in 0..r {
            let bi = tb.data()[i];
            for j in 0..s {
                v.data_mut()[i * s + j] += bi;
            }
        }
        self.push(Op::AddCol { x, bias }, v)
    }

    /// Y[i,j,k] = A[i,j] · T[i,j,k]: broadcast multiply over the trailing axis.
    pub fn mul_bcast(&mut self, a: Var, t: Var) -> Var {
        let (ta, tt) = (self.value(a), self.value(t));
        assert_eq!(ta.rank(), 2);
        assert_eq!(tt.rank(), 3);
        assert_eq!(ta.shape(), &tt.shape()[..2], "mul_bcast leading dims");
        let m = tt.shape()[2];
        let mut v = tt.clone();
        for (i, &av) in ta.data().iter().enumerate() {
            for k in 0..m {
                v.data_mut()[i * m + k] *= av;
            }
        }
        self.push(Op::MulBcast { a, t }, v)
    }

    /// Per-channel mixing across the slot axis.
    /// kernels: (L, d, d); x: (L, d) or (L, d, m). Y[l,j,·] = Σ_i K[l,j,i]·X[l,i,·].
    pub fn depthwise_mix(&mut self, kernels: Var, x: Var) -> Var {
        let (tk, tx) = (self.value(kernels), self.value(x));
        assert_eq!(tk.rank(), 3);
        let (l, d) = (tk.shape()[0], tk.shape()[1]);
        assert_eq!(tk.shape()[2], d, "kernels must be (L, d, d)");
        assert!(tx.rank() == 2 || tx.rank() == 3, "x rank {:?}", tx.shape());
        assert_eq!(&tx.shape()[..2], &[l, d], "x leading dims {:?}", tx.shape());
        let m = if tx.rank() == 3 { tx.shape()[2] } else { 1 };
        let mut v = Tensor::zeros(tx.shape());
        for c in 0..l {
            let kbase = c * d * d;
            let xbase = c * d * m;
            for j in 0..d {
                for i in 0..d {
                    let kji = tk.data()[kbase + j * d + i];
                    if kji == 0.0 {
                        continue;
                    }
                    for b in 0..m {
                        v.data_mut()[xbase + j * m + b] += kji * tx.data()[xbase + i * m + b];
                    }
                }
            }
        }
        self.push(Op::DepthwiseMix { kernels, x }, v)
    }

    /// Stacks slot columns into one tall output: (q, s[, m]) → (s·q, m-or-1),
    /// out[j·q + a, ·] = X[a, j, ·]. This is the slot-major flattening used for
    /// measurement vectors and their Jacobians.
    pub fn fold_slots(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        assert!(tx.rank() == 2 || tx.rank() == 3);
        let (q, s) = (tx.shape()[0], tx.shape()[1]);
        let m = if tx.rank() == 3 { tx.shape()[2] } else { 1 };
        let mut v = Tensor::zeros(&[q * s, m]);
        for a in 0..q {
            for j in 0..s {
                for b in 0..m {
                    v.data_mut()[(j * q + a) * m + b] = tx.data()[(a * s + j) * m + b];
                }
            }
        }
        self.push(Op::FoldSlots(x), v)
    }

    /// Block-companion transition applied to a latent column (m, 1):
    /// the top m−L entries shift up by L, the bottom L entries are B·z where
    /// B = [B_1 … B_{n_d}] is the (L, m) concatenation of learnable blocks.
    pub fn companion_matvec(&mut self, blocks: Var, z: Var) -> Var {
        let (tb, tz) = (self.value(blocks), self.value(z));
        let (l, m) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(tz.shape(), &[m, 1], "latent shape {:?}", tz.shape());
        assert!(l <= m && m % l == 0, "block width {l} incompatible with latent {m}");
        let mut v = Tensor::zeros(&[m, 1]);
        v.data_mut()[..m - l].copy_from_slice(&tz.data()[l..]);
        for j in 0..l {
            let mut s = 0.0;
            for i in 0..m {
                s += tb.data()[j * m + i] * tz.data()[i];
            }
            v.data_mut()[m - l + j] = s;
        }
        self.push(Op::CompanionMatVec { blocks, z }, v)
    }

    /// A·M for the block-companion A, exploiting the shift structure:
    /// rows 0..m−L of the product are rows L..m of M; the bottom L rows are B·M.
    pub fn companion_left_mul(&mut self, blocks: Var, rhs: Var) -> Var {
        let (tb, tm) = (self.value(blocks), self.value(rhs));
        let (l, m) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(tm.rank(), 2);
        assert_eq!(tm.shape()[0], m, "rhs rows {} vs latent {}", tm.shape()[0], m);
        let k = tm.shape()[1];
        let mut v = Tensor::zeros(&[m, k]);
        v.data_mut()[..(m - l) * k].copy_from_slice(&tm.data()[l * k..]);
        tensor::matmul_acc(&mut v.data_mut()[(m - l) * k..], tb.data(), tm.data(), l, m, k);
        self.push(Op::CompanionLeftMul { blocks, rhs }, v)
    }

    /// Solves A·X = B for symmetric positive definite A via Cholesky. The
    /// factor is cached on the node so the adjoint solve reuses it.
    /// Backward: grad_B = A⁻¹·ḡ (adjoint solve), grad_A = −grad_B·Xᵀ symmetrized.
    pub fn linear_solve(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rank(), 2);
        assert_eq!(ta.rows(), ta.cols());
        assert_eq!(tb.shape()[0], ta.rows(), "solve rhs rows");
        let chol = linalg::cholesky(ta)?;
        let x = linalg::cholesky_solve(&chol, tb);
        Ok(self.push(Op::LinearSolve { a, b, chol }, x))
    }

    /// Reverse sweep from a scalar loss. Returns per-parameter gradients;
    /// parameters the loss never touched have no entry. The tape itself is
    /// immutable here, so repeated backward passes give identical results.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients, AutodiffError> {
        let lnode = &self.nodes[loss.0];
        if lnode.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lnode.value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::filled(lnode.value.shape(), 1.0));
        let mut grads = Gradients { by_param: (0..store.len()).map(|_| None).collect() };

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(pid) = node.param {
                if !g.all_finite() {
                    return Err(AutodiffError::NonFiniteGrad { param: store.name(pid).to_string() });
                }
                match &mut grads.by_param[pid.0] {
                    Some(t) => t.add_in_place(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.push_adjoints(node, &g, &mut adj);
        }
        Ok(grads)
    }

    fn push_adjoints(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(adj, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                accumulate(adj, *b, g.zip_map(self.value(*a), |gv, av| gv * av));
            }
            Op::Scale(a, k) => accumulate(adj, *a, g.map(|x| k * x)),
            Op::MatMul(a, b) => {
                accumulate(adj, *a, tensor::matmul_nt(g, self.value(*b)));
                accumulate(adj, *b, tensor::matmul_tn(self.value(*a), g));
            }
            Op::Transpose(a) => accumulate(adj, *a, g.transposed()),
            Op::Reshape(a) => accumulate(adj, *a, g.reshaped(self.value(*a).shape())),
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let sh = self.value(p).shape();
                    let rs: usize = sh[1..].iter().product();
                    let rows = sh[0];
                    let part = Tensor::new(sh, g.data()[row * rs..(row + rows) * rs].to_vec());
                    accumulate(adj, p, part);
                    row += rows;
                }
            }
            Op::SliceRows { src, start } => {
                let sh = self.value(*src).shape();
                let rs: usize = sh[1..].iter().product();
                let mut full = Tensor::zeros(sh);
                full.data_mut()[start * rs..start * rs + g.len()].copy_from_slice(g.data());
                accumulate(adj, *src, full);
            }
            Op::Gelu(a) => {
                accumulate(adj, *a, g.zip_map(self.value(*a), |gv, x| gv * tensor::gelu_grad(x)));
            }
            Op::GeluPrime(a) => {
                accumulate(adj, *a, g.zip_map(self.value(*a), |gv, x| gv * tensor::gelu_grad2(x)));
            }
            Op::Exp(a) => {
                // value already holds exp(x)
                accumulate(adj, *a, g.zip_map(&node.value, |gv, e| gv * e));
            }
            Op::Diag(a) => {
                let n = self.value(*a).len();
                let d: Vec<f64> = (0..n).map(|i| g.data()[i * n + i]).collect();
                accumulate(adj, *a, Tensor::new(&[n], d));
            }
            Op::Sum(a) => {
                accumulate(adj, *a, Tensor::filled(self.value(*a).shape(), g.item()));
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = 2.0 * g.item() / ta.len() as f64;
                let d = ta.zip_map(tb, |x, y| c * (x - y));
                accumulate(adj, *b, d.map(|x| -x));
                accumulate(adj, *a, d);
            }
            Op::AddCol { x, bias } => {
                let (r, s) = (g.shape()[0], g.shape()[1]);
                let mut db = Tensor::zeros(&[r, 1]);
                for i in 0..r {
                    db.data_mut()[i] = g.data()[i * s..(i + 1) * s].iter().sum();
                }
                accumulate(adj, *x, g.clone());
                accumulate(adj, *bias, db);
            }
            Op::MulBcast { a, t } => {
                let (ta, tt) = (self.value(*a), self.value(*t));
                let m = tt.shape()[2];
                let mut da = Tensor::zeros(ta.shape());
                for i in 0..ta.len() {
                    let mut s = 0.0;
                    for k in 0..m {
                        s += g.data()[i * m + k] * tt.data()[i * m + k];
                    }
                    da.data_mut()[i] = s;
                }
                let mut dt = g.clone();
                for (i, &av) in ta.data().iter().enumerate() {
                    for k in 0..m {
                        dt.data_mut()[i * m + k] *= av;
                    }
                }
                accumulate(adj, *a, da);
                accumulate(adj, *t, dt);
            }
            Op::DepthwiseMix { kernels, x } => {
                let (tk, tx) = (self.value(*kernels), self.value(*x));
                let (l, d) = (tk.shape()[0], tk.shape()[1]);
                let m = if tx.rank() == 3 { tx.shape()[2] } else { 1 };
                let mut dk = Tensor::zeros(tk.shape());
                let mut dx = Tensor::zeros(tx.shape());
                for c in 0..l {
                    let kbase = c * d * d;
                    let xbase = c * d * m;
                    for j in 0..d {
                        for i in 0..d {
                            let kji = tk.data()[kbase + j * d + i];
                            let mut s = 0.0;
                            for b in 0..m {
                                let gv = g.data()[xbase + j * m + b];
                                s += gv * tx.data()[xbase + i * m + b];
                                dx.data_mut()[xbase + i * m + b] += gv * kji;
                            }
                            dk.data_mut()[kbase + j * d + i] = s;
                        }
                    }
                }
                accumulate(adj, *kernels, dk);
                accumulate(adj, *x, dx);
            }
            Op::FoldSlots(x) => {
                let tx = self.value(*x);
                let (q, s) = (tx.shape()[0], tx.shape()[1]);
                let m = if tx.rank() == 3 { tx.shape()[2] } else { 1 };
                let mut dx = Tensor::zeros(tx.shape());
                for a in 0..q {
                    for j in 0..s {
                        for b in 0..m {
                            dx.data_mut()[(a * s + j) * m + b] = g.data()[(j * q + a) * m + b];
                        }
                    }
                }
                accumulate(adj, *x, dx);
            }
            Op::CompanionMatVec { blocks, z } => {
                let (tb, tz) = (self.value(*blocks), self.value(*z));
                let (l, m) = (tb.shape()[0], tb.shape()[1]);
                let g_bot = &g.data()[m - l..];
                let mut dz = Tensor::zeros(&[m, 1]);
                dz.data_mut()[l..].copy_from_slice(&g.data()[..m - l]);
                let mut db = Tensor::zeros(&[l, m]);
                for j in 0..l {
                    let gj = g_bot[j];
                    for i in 0..m {
                        dz.data_mut()[i] += tb.data()[j * m + i] * gj;
                        db.data_mut()[j * m + i] = gj * tz.data()[i];
                    }
                }
                accumulate(adj, *z, dz);
                accumulate(adj, *blocks, db);
            }
            Op::CompanionLeftMul { blocks, rhs } => {
                let (tb, tm) = (self.value(*blocks), self.value(*rhs));
                let (l, m) = (tb.shape()[0], tb.shape()[1]);
                let k = tm.shape()[1];
                let g_bot = Tensor::new(&[l, k], g.data()[(m - l) * k..].to_vec());
                let mut dm = Tensor::zeros(&[m, k]);
                dm.data_mut()[l * k..].copy_from_slice(&g.data()[..(m - l) * k]);
                // dM += Bᵀ·ḡ_bot
                let bt_g = tensor::matmul_tn(tb, &g_bot);
                dm.add_in_place(&bt_g);
                // dB = ḡ_bot·Mᵀ
                let db = tensor::matmul_nt(&g_bot, tm);
                accumulate(adj, *rhs, dm);
                accumulate(adj, *blocks, db);
            }
            Op::LinearSolve { a, b, chol } => {
                let x = &node.value;
                let rank1 = x.rank() == 1;
                let gb = linalg::cholesky_solve(chol, g);
                // grad_A = −grad_B·Xᵀ, symmetrized (A is symmetric by construction).
                let (gb2, x2) = if rank1 {
                    (gb.reshaped(&[gb.len(), 1]), x.reshaped(&[x.len(), 1]))
                } else {
                    (gb.clone(), x.clone())
                };
                let ga_raw = tensor::matmul_nt(&gb2, &x2);
                let ga = ga_raw.zip_map(&ga_raw.transposed(), |p, q| -0.5 * (p + q));
                accumulate(adj, *b, gb);
                accumulate(adj, *a, ga);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_in_place(&t),
        slot => *slot = Some(t),
    }
}
