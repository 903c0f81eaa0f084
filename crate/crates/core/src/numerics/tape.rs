//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are recorded in execution order on a [`Tape`], so the node list is
//! already topologically sorted. [`Tape::backward`] walks it in reverse and
//! accumulates vector-Jacobian products into a [`Gradients`] table.
//!
//! ```
//! use moment_align::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(&Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

use super::tensor::{matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const LAYER_NORM_EPS: f64 = 1e-5;
/// Rows with a smaller Euclidean norm cannot be normalized.
pub const MIN_NORM: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    #[cfg(test)]
    pub(crate) fn from_test(i: usize) -> Self {
        Var(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, S),
    Neg(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    /// Per-row inverse standard deviation.
    LayerNormRows(Var, Vec<S>),
    /// Per-row input norm.
    L2NormalizeRows(Var, Vec<S>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    tracked: bool,
}

/// Ordered record of operations for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `log σ(x)`, stable for large |x|.
fn log_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    let k = S::of((2.0 / std::f64::consts::PI).sqrt());
    let a = S::of(0.044715);
    let half = S::of(0.5);
    let inner = k * (x + a * x * x * x);
    let th = inner.tanh();
    let y = half * x * (S::one() + th);
    let dy = half * (S::one() + th)
        + half * x * (S::one() - th * th) * k * (S::one() + S::of(3.0) * a * x * x);
    (y, dy)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node; previously issued [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Records a leaf; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        let tracked = tensor.requires_grad();
        self.push(tensor, Op::Leaf, tracked)
    }

    /// Records a copy of `tensor` as a differentiable leaf.
    pub fn param(&mut self, tensor: &Tensor<S>) -> Var {
        self.push(tensor.clone().with_grad(true), Op::Leaf, true)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        self.push(tensor.with_grad(false), Op::Leaf, false)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = self.tracked(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MatMul(a, b), t))
    }

    /// `a · bᵀ`, with `a: m×k` and `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return Err(self.shape_err("matmul_t", a, b));
        }
        let data = matmul_nt_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = self.tracked(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MatMulNt(a, b), t))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        let (_, ca) = self.dims(a)?;
        match self.dims(b)? {
            (1, 1) => Ok(Broadcast::Scalar),
            (1, cb) if cb == ca => Ok(Broadcast::Row),
            _ => Err(self.shape_err(op, a, b)),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: fn(Var, Var, Broadcast) -> Op<S>,
    ) -> Result<Var> {
        let kind = self.broadcast_kind(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let cols = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| {
                let y = match kind {
                    Broadcast::Same => bv[idx],
                    Broadcast::Row => bv[idx % cols],
                    Broadcast::Scalar => bv[0],
                };
                f(x, y)
            })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(out, op(a, b, kind), t))
    }

    /// Entry-wise sum; `b` may be same-shaped, a `1×n` row or a `1×1` scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Entry-wise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let out = self.value(a).map(f);
        let t = self.tracked(&[a]);
        self.push(out, op, t)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `log σ(a)` computed without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((i, x)) = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .find(|(_, x)| **x <= S::zero())
        {
            return Err(Error::Domain {
                op: "log",
                detail: format!("entry {i} is {x}"),
            });
        }
        Ok(self.unary(a, |x| x.ln(), Op::Log(a)))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(r * c);
        for row in x.chunks(c) {
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let start = out.len();
            let mut sum = S::zero();
            for &v in row {
                let e = (v - max).exp();
                sum += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= sum;
            }
        }
        let t = self.tracked(&[a]);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::SoftmaxRows(a), t))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let x = self.value(a).data();
        let n = S::of(c as f64);
        let eps = S::of(LAYER_NORM_EPS);
        let mut out = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for row in x.chunks(c) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let inv = S::one() / (var + eps).sqrt();
            out.extend(row.iter().map(|&v| (v - mean) * inv));
            inv_std.push(inv);
        }
        let t = self.tracked(&[a]);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::LayerNormRows(a, inv_std), t))
    }

    /// Layer norm followed by a learned per-column gain and bias (both `1×c`).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.layer_norm_rows(a)?;
        let g = self.mul(n, gain)?;
        self.add(g, bias)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(r * c);
        let mut norms = Vec::with_capacity(r);
        for (i, row) in x.chunks(c).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if !(norm.as_f64() >= MIN_NORM) {
                return Err(Error::Degenerate {
                    op: "l2_normalize",
                    row: i,
                    norm: norm.as_f64(),
                });
            }
            out.extend(row.iter().map(|&v| v / norm));
            norms.push(norm);
        }
        let t = self.tracked(&[a]);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::L2NormalizeRows(a, norms), t))
    }

    /// Columns `[start, start + len)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if len == 0 || start + len > c {
            return Err(Error::Range(format!(
                "column slice {start}..{} of a {c}-column tensor",
                start + len
            )));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for row in x.chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let t = self.tracked(&[a]);
        Ok(self.push(Tensor::matrix(r, len, out)?, Op::SliceCols(a, start), t))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Rank("concat of zero tensors".into()))?;
        let (r, _) = self.dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pr != r {
                return Err(self.shape_err("concat_cols", first, p));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = self.tracked(parts);
        Ok(self.push(
            Tensor::matrix(r, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            t,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let t = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<S>() / S::of(v.numel() as f64);
        let t = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::MeanAll(a), t)
    }

    /// Reverse pass from a scalar `loss`. The tape itself is left intact.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.nodes.is_empty() {
            return Err(Error::Rank("backward on an empty tape".into()));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Rank(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].tracked).map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient matches value shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, contrib: Vec<S>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn reduce_broadcast(&self, b: Var, kind: Broadcast, full: Vec<S>, cols: usize) -> Vec<S> {
        match kind {
            Broadcast::Same => full,
            Broadcast::Row => {
                let mut out = vec![S::zero(); cols];
                for row in full.chunks(cols) {
                    out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
                }
                debug_assert_eq!(out.len(), self.value(b).numel());
                out
            }
            Broadcast::Scalar => vec![full.into_iter().sum()],
        }
    }

    fn operand_at(&self, b: Var, kind: Broadcast, idx: usize, cols: usize) -> S {
        let d = self.value(b).data();
        match kind {
            Broadcast::Same => d[idx],
            Broadcast::Row => d[idx % cols],
            Broadcast::Scalar => d[0],
        }
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("rank 2");
                let n = self.value(*b).cols();
                if self.nodes[a.0].tracked {
                    let da = matmul_nt_kernel(g, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].tracked {
                    let db = matmul_tn_kernel(self.value(*a).data(), g, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("rank 2");
                let n = self.value(*b).rows();
                if self.nodes[a.0].tracked {
                    let da = matmul_kernel(g, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].tracked {
                    let db = matmul_tn_kernel(g, self.value(*a).data(), m, n, k);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let cols = out.cols();
                self.accumulate(grads, *a, g.to_vec());
                if self.nodes[b.0].tracked {
                    let full = if matches!(node.op, Op::Sub(..)) {
                        g.iter().map(|&x| -x).collect()
                    } else {
                        g.to_vec()
                    };
                    let db = self.reduce_broadcast(*b, *kind, full, cols);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b, kind) => {
                let cols = out.cols();
                if self.nodes[a.0].tracked {
                    let da = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * self.operand_at(*b, *kind, i, cols))
                        .collect();
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].tracked {
                    let av = self.value(*a).data();
                    let full = g.iter().zip(av).map(|(&gi, &x)| gi * x).collect();
                    let db = self.reduce_broadcast(*b, *kind, full, cols);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|&x| x * *c).collect());
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.iter().map(|&x| -x).collect()),
            Op::Sigmoid(a) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(&gi, &y)| gi * y * (S::one() - y))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| gi * sigmoid(-xi))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let d = g.iter().zip(x).map(|(&gi, &xi)| gi / xi).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = g.iter().zip(out.data()).map(|(&gi, &y)| gi * y).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| gi * gelu_parts(xi).1)
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(out.data().chunks(c)) {
                    let dot: S = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    d.extend(gr.iter().zip(yr).map(|(&x, &y)| y * (x - dot)));
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNormRows(a, inv_std) => {
                let c = out.cols();
                let n = S::of(c as f64);
                let mut d = Vec::with_capacity(g.len());
                for ((gr, yr), &inv) in g.chunks(c).zip(out.data().chunks(c)).zip(inv_std) {
                    let mean_g = gr.iter().copied().sum::<S>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum::<S>() / n;
                    d.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(&x, &y)| inv * (x - mean_g - y * mean_gy)),
                    );
                }
                self.accumulate(grads, *a, d);
            }
            Op::L2NormalizeRows(a, norms) => {
                let c = out.cols();
                let mut d = Vec::with_capacity(g.len());
                for ((gr, yr), &norm) in g.chunks(c).zip(out.data().chunks(c)).zip(norms) {
                    let dot: S = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    d.extend(gr.iter().zip(yr).map(|(&x, &y)| (x - y * dot) / norm));
                }
                self.accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).dims2().expect("rank 2");
                let w = out.cols();
                let mut d = vec![S::zero(); r * c];
                for (i, gr) in g.chunks(w).enumerate() {
                    d[i * c + start..i * c + start + w].copy_from_slice(gr);
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let r = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.nodes[p.0].tracked {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0] / S::of(n as f64); n]);
            }
        }
    }
}
