//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are appended to a [`Tape`] in execution order, which is
//! already a topological order, so the backward sweep walks node ids in
//! reverse and every node's rule runs after all of its consumers.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::tensor::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Square(usize),
    Exp(usize),
    Log(usize),
    ClampMin(usize, f64),
    Sum(usize),
    Mean(usize),
    Trace(usize),
    FrobeniusSq(usize),
    ConcatCols(Vec<usize>),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Single-owner recording of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Discards every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that participates in differentiation.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = values.first().map_or(0, |v| v.rows());
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(Error::shape("concat_cols", values[0].shape(), v.shape()));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row_slice(r));
            }
        }
        let rg = parts.iter().any(|p| self.requires(p.id));
        Ok(self.push(
            Tensor::matrix(rows, total, data)?,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    /// Runs the backward sweep from a scalar `loss`.
    ///
    /// A tape can be swept once; call [`Tape::reset`] before recording again.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::InvalidState(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.all_finite() {
            return Err(Error::NonFinite(format!("loss = {}", root.value.item())));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut out = Vec::with_capacity(nodes.len());
        for (node, g) in nodes.iter().zip(grads) {
            let t = match (&node.op, g) {
                (_, Some(g)) => Some(Tensor::new(node.value.shape().to_vec(), g)?),
                (Op::Leaf, None) if node.requires_grad => {
                    Some(Tensor::zeros(node.value.shape()))
                }
                _ => None,
            };
            if let (Op::Leaf, Some(t)) = (&node.op, &t) {
                if !t.all_finite() {
                    return Err(Error::NonFinite("leaf gradient".into()));
                }
            }
            out.push(t);
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, delta: Vec<f64>) {
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

/// Gradient flowing into an operand that may have been scalar-broadcast.
fn reduce_to(operand: &Tensor, g: Vec<f64>) -> Vec<f64> {
    if operand.numel() == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

fn broadcast_get(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let rg = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &*nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2();
            let n = val(*b).cols();
            if rg(*a) {
                let bt = transpose_raw(val(*b).data(), k, n);
                accumulate(grads, *a, matmul_raw(g, &bt, m, n, k));
            }
            if rg(*b) {
                let at = transpose_raw(val(*a).data(), m, k);
                accumulate(grads, *b, matmul_raw(&at, g, k, m, n));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = val(*a).dims2();
            accumulate(grads, *a, transpose_raw(g, c, r));
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if rg(*a) {
                accumulate(grads, *a, reduce_to(val(*a), g.to_vec()));
            }
            if rg(*b) {
                let gb = g.iter().map(|v| sign * v).collect();
                accumulate(grads, *b, reduce_to(val(*b), gb));
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if rg(*a) {
                let ga = g.iter().enumerate().map(|(i, gi)| gi * broadcast_get(vb, i)).collect();
                accumulate(grads, *a, reduce_to(va, ga));
            }
            if rg(*b) {
                let gb = g.iter().enumerate().map(|(i, gi)| gi * broadcast_get(va, i)).collect();
                accumulate(grads, *b, reduce_to(vb, gb));
            }
        }
        Op::Scale(a, s) => accumulate(grads, *a, g.iter().map(|v| v * s).collect()),
        Op::Relu(a) => {
            let x = val(*a).data();
            accumulate(grads, *a, g.iter().zip(x).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect());
        }
        Op::Tanh(a) => {
            let y = out.data();
            accumulate(grads, *a, g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect());
        }
        Op::Square(a) => {
            let x = val(*a).data();
            accumulate(grads, *a, g.iter().zip(x).map(|(gi, xi)| 2.0 * gi * xi).collect());
        }
        Op::Exp(a) => {
            let y = out.data();
            accumulate(grads, *a, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect());
        }
        Op::Log(a) => {
            let x = val(*a).data();
            accumulate(grads, *a, g.iter().zip(x).map(|(gi, xi)| gi / xi).collect());
        }
        Op::ClampMin(a, lo) => {
            let x = val(*a).data();
            accumulate(grads, *a, g.iter().zip(x).map(|(gi, xi)| if xi > lo { *gi } else { 0.0 }).collect());
        }
        Op::Sum(a) => accumulate(grads, *a, vec![g[0]; val(*a).numel()]),
        Op::Mean(a) => {
            let n = val(*a).numel();
            accumulate(grads, *a, vec![g[0] / n as f64; n]);
        }
        Op::Trace(a) => {
            let n = val(*a).rows();
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                d[i * n + i] = g[0];
            }
            accumulate(grads, *a, d);
        }
        Op::FrobeniusSq(a) => {
            let x = val(*a).data();
            accumulate(grads, *a, x.iter().map(|xi| 2.0 * g[0] * xi).collect());
        }
        Op::ConcatCols(parts) => {
            let (rows, total) = out.dims2();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                if rg(p) {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, p, d);
                }
                offset += w;
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let (n, c) = val(*logits).dims2();
            let scale = g[0] / n as f64;
            let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (i, &y) in labels.iter().enumerate() {
                d[i * c + y] -= scale;
            }
            accumulate(grads, *logits, d);
        }
    }
}

fn is_broadcast_scalar(t: &Tensor) -> bool {
    t.numel() == 1
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a scalar node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().matmul(&other.value())?;
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    pub fn t(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape().len() != 2 {
            return Err(Error::shape("transpose", v.shape(), &[]));
        }
        Ok(self.unary(v.transpose(), Op::Transpose(self.id)))
    }

    fn elementwise(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        if a.shape() == b.shape() {
            return a.zip_map(&b, f);
        }
        if is_broadcast_scalar(&b) {
            let s = b.data()[0];
            return Ok(a.map(|x| f(x, s)));
        }
        if is_broadcast_scalar(&a) {
            let s = a.data()[0];
            return Ok(b.map(|x| f(s, x)));
        }
        Err(Error::shape(name, a.shape(), b.shape()))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.elementwise(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.elementwise(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.elementwise(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    /// Natural log; non-positive inputs yield non-finite values that the
    /// backward sweep reports as [`Error::NonFinite`].
    pub fn log(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Log(self.id))
    }

    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        let v = self.value().map(|x| x.max(lo));
        self.unary(v, Op::ClampMin(self.id, lo))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let v = Tensor::scalar(x.sum() / x.numel() as f64);
        self.unary(v, Op::Mean(self.id))
    }

    pub fn trace(self) -> Result<Var<'t>> {
        let x = self.value();
        match x.shape() {
            [r, c] if r == c => {
                let v = Tensor::scalar((0..*r).map(|i| x.get(i, i)).sum());
                Ok(self.unary(v, Op::Trace(self.id)))
            }
            s => Err(Error::shape("trace", s, &[])),
        }
    }

    pub fn frobenius_sq(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().norm_sq());
        self.unary(v, Op::FrobeniusSq(self.id))
    }

    /// Mean softmax cross-entropy of `[n × C]` logits against labels,
    /// computed with a max-shifted log-sum-exp.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c) = x.dims2();
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", x.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = x.row_slice(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[y];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let v = Tensor::scalar(total / n as f64);
        Ok(self.unary(
            v,
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}
