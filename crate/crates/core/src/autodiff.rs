//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so walking the tape backwards visits them in reverse
//! topological order. Handles ([`Var`]) are plain indices into the tape.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use crate::tensor::{gemm, log_softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a right-hand operand is stretched over the left-hand shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn broadcast_kind(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if b == (1, 1) {
        Ok(Broadcast::Scalar)
    } else if b == (1, a.1) {
        Ok(Broadcast::Row)
    } else if b == (a.0, 1) {
        Ok(Broadcast::Col)
    } else {
        Err(Error::shape(op, a, b))
    }
}

#[inline]
fn bval(b: &Tensor, kind: Broadcast, i: usize, j: usize) -> f64 {
    match kind {
        Broadcast::Same => b.get(i, j),
        Broadcast::Row => b.data()[j],
        Broadcast::Col => b.data()[i],
        Broadcast::Scalar => b.data()[0],
    }
}

/// Sums a full-shape gradient down to the broadcast operand's shape.
fn reduce_to(g: &Tensor, kind: Broadcast) -> Tensor {
    match kind {
        Broadcast::Same => g.clone(),
        Broadcast::Scalar => Tensor::scalar(g.sum()),
        Broadcast::Row => {
            let mut out = Tensor::zeros(1, g.cols());
            for i in 0..g.rows() {
                for (o, v) in out.data_mut().iter_mut().zip(g.row(i)) {
                    *o += v;
                }
            }
            out
        }
        Broadcast::Col => Tensor::from_fn(g.rows(), 1, |i, _| g.row(i).iter().sum()),
    }
}

enum Op {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var, trans_b: bool },
    SpMM { s: Arc<CsrMatrix>, b: Var },
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Powf(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
    PairwiseSqDist(Var),
    NllMean(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation recorder. A tape in training mode owns the RNG that draws
/// dropout masks; in eval mode dropout is the identity.
pub struct Tape {
    nodes: Vec<Node>,
    rng: Option<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::eval()
    }
}

impl Tape {
    pub fn eval() -> Self {
        Tape {
            nodes: Vec::new(),
            rng: None,
        }
    }

    pub fn training(rng: ChaCha8Rng) -> Self {
        Tape {
            nodes: Vec::new(),
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = Tensor::zeros(sa.0, sb.1);
        gemm(1.0, self.value(a), false, self.value(b), false, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b: false }, ng))
    }

    /// `a * bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let mut out = Tensor::zeros(sa.0, sb.0);
        gemm(1.0, self.value(a), false, self.value(b), true, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b: true }, ng))
    }

    /// Constant sparse matrix times a tape value.
    pub fn spmm(&mut self, s: &Arc<CsrMatrix>, b: Var) -> Result<Var> {
        let out = s.matmul(self.value(b))?;
        let ng = self.ng(b);
        Ok(self.push(out, Op::SpMM { s: Arc::clone(s), b }, ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let kind = broadcast_kind(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(va.rows(), va.cols(), |i, j| f(va.get(i, j), bval(vb, kind, i, j)));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, mk(a, b, kind), ng))
    }

    /// Elementwise sum; `b` may be broadcast as a row, column, or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax_rows();
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            log_softmax_in_place(out.row_mut(i));
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len().max(1) as f64);
        let ng = self.ng(a);
        self.push(out, Op::Mean(a), ng)
    }

    /// Column means as a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = reduce_to(v, Broadcast::Row);
        let r = v.rows().max(1) as f64;
        out.data_mut().iter_mut().for_each(|x| *x /= r);
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::hcat(&values)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if start > end || end > v.rows() {
            return Err(Error::shape("slice_rows", v.shape(), (start, end)));
        }
        let ids: Vec<usize> = (start..end).collect();
        let out = v.gather_rows(&ids);
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceRows(a, start), ng))
    }

    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::shape("gather_rows", v.shape(), (bad, 0)));
        }
        let out = v.gather_rows(ids);
        let ng = self.ng(a);
        Ok(self.push(out, Op::GatherRows(a, ids.to_vec()), ng))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)` during
    /// training. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout rate {p} outside [0, 1)")));
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(a);
        };
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let n = self.nodes[a.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let v = self.value(a);
        let data = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(v.rows(), v.cols(), data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Dropout(a, mask), ng))
    }

    /// Squared Euclidean distances between all row pairs of `a`. The
    /// diagonal is exactly zero and tiny negative round-off is clamped.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Var {
        let h = self.value(a);
        let m = h.rows();
        let mut gram = Tensor::zeros(m, m);
        gemm(1.0, h, false, h, true, 0.0, &mut gram);
        let norms: Vec<f64> = (0..m).map(|i| h.row(i).iter().map(|x| x * x).sum()).collect();
        let out = Tensor::from_fn(m, m, |i, j| {
            if i == j {
                0.0
            } else {
                (norms[i] + norms[j] - 2.0 * gram.get(i, j)).max(0.0)
            }
        });
        let ng = self.ng(a);
        self.push(out, Op::PairwiseSqDist(a), ng)
    }

    /// `-mean_i a[i, targets[i]]`; with log-probabilities this is the
    /// cross-entropy.
    pub fn nll_mean(&mut self, a: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if targets.len() != v.rows() || targets.iter().any(|&t| t >= v.cols()) {
            return Err(Error::shape("nll_mean", v.shape(), (targets.len(), 1)));
        }
        if targets.is_empty() {
            return Err(Error::Contract("nll_mean over zero rows".into()));
        }
        let total: f64 = targets.iter().enumerate().map(|(i, &t)| v.get(i, t)).sum();
        let out = Tensor::scalar(-total / targets.len() as f64);
        let ng = self.ng(a);
        Ok(self.push(out, Op::NllMean(a, targets.to_vec()), ng))
    }

    /// Gradients of a scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients(grads))
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    // d(a·b)/da = g·bᵀ; d(a·bᵀ)/da = g·b
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    gemm(1.0, g, false, vb, !trans_b, 0.0, &mut ga);
                    accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(vb.rows(), vb.cols());
                    if *trans_b {
                        gemm(1.0, g, true, va, false, 0.0, &mut gb);
                    } else {
                        gemm(1.0, va, true, g, false, 0.0, &mut gb);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::SpMM { s, b } => {
                let vb = self.value(*b);
                let mut gb = Tensor::zeros(vb.rows(), vb.cols());
                s.transpose_matmul_acc(g, &mut gb);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b, kind) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, reduce_to(g, *kind));
                }
            }
            Op::Sub(a, b, kind) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, reduce_to(&g.map(|x| -x), *kind));
                }
            }
            Op::Mul(a, b, kind) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let ga = Tensor::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * bval(vb, *kind, i, j));
                    accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let full = Tensor::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * va.get(i, j));
                    accumulate(grads, *b, reduce_to(&full, *kind));
                }
            }
            Op::Scale(a, k) => accumulate(grads, *a, g.map(|x| k * x)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Relu(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, zip_map(g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
            }
            Op::Tanh(a) => accumulate(grads, *a, zip_map(g, y, |gi, yi| gi * (1.0 - yi * yi))),
            Op::Sigmoid(a) => accumulate(grads, *a, zip_map(g, y, |gi, yi| gi * yi * (1.0 - yi))),
            Op::Exp(a) => accumulate(grads, *a, zip_map(g, y, |gi, yi| gi * yi)),
            Op::Log(a) => accumulate(grads, *a, zip_map(g, self.value(*a), |gi, xi| gi / xi)),
            Op::Square(a) => accumulate(grads, *a, zip_map(g, self.value(*a), |gi, xi| 2.0 * gi * xi)),
            Op::Powf(a, p) => accumulate(
                grads,
                *a,
                zip_map(g, self.value(*a), |gi, xi| gi * p * xi.powf(p - 1.0)),
            ),
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for ((o, &gi), &yi) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = yi * (gi - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let total: f64 = g.row(i).iter().sum();
                    for ((o, &gi), &yi) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = gi - yi.exp() * total;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                accumulate(grads, *a, Tensor::full(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                accumulate(grads, *a, Tensor::full(r, c, g.item() / (r * c).max(1) as f64));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let scale = 1.0 / r.max(1) as f64;
                accumulate(grads, *a, Tensor::from_fn(r, c, |_, j| g.data()[j] * scale));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let gp = Tensor::from_fn(r, c, |i, j| g.get(i, offset + j));
                        accumulate(grads, p, gp);
                    }
                    offset += c;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..g.rows() {
                    ga.row_mut(start + i).copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, ids) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for (k, &i) in ids.iter().enumerate() {
                    for (o, &v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                let ga = Tensor::from_vec(g.rows(), g.cols(), data).expect("mask shape");
                accumulate(grads, *a, ga);
            }
            Op::PairwiseSqDist(a) => {
                // dD_ij/dh_i = 2(h_i - h_j); with S = G + Gᵀ the gradient is
                // 2(diag(S·1)·H - S·H).
                let h = self.value(*a);
                let m = h.rows();
                let s = Tensor::from_fn(m, m, |i, j| if i == j { 0.0 } else { g.get(i, j) + g.get(j, i) });
                let mut ga = Tensor::zeros(h.rows(), h.cols());
                gemm(-2.0, &s, false, h, false, 0.0, &mut ga);
                for i in 0..m {
                    let rs: f64 = s.row(i).iter().sum();
                    for (o, &hv) in ga.row_mut(i).iter_mut().zip(h.row(i)) {
                        *o += 2.0 * rs * hv;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::NllMean(a, targets) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                let k = -g.item() / targets.len() as f64;
                for (i, &t) in targets.iter().enumerate() {
                    ga.set(i, t, k);
                }
                accumulate(grads, *a, ga);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_vec(g.rows(), g.cols(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradient buffers indexed by tape handle.
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}
