//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only list of nodes. Every operation pushes one
//! node holding its forward value and an [`Op`] descriptor naming its
//! inputs, so node order is already a topological order and `backward`
//! is a single reverse sweep. Handles ([`Var`]) are plain indices.
//!
//! Broadcasting is limited to scalar-with-tensor in the binary ops;
//! [`Tape::add_row`] covers the bias case explicitly.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::math;
use crate::quant::{self, QuantSpec, ScaleRule, Scheme};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Quantizer applied row by row inside [`Op::QuantSelect`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowQuantizer {
    pub scheme: Scheme,
    pub rule: ScaleRule,
}

impl Default for RowQuantizer {
    fn default() -> Self {
        Self {
            scheme: Scheme::Asymmetric,
            rule: ScaleRule::MinMax,
        }
    }
}

/// Backward rule descriptor for one node.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    MaxScalar(Var, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Softmax { input: Var, tau: f64 },
    Reshape(Var),
    SliceCols { input: Var, start: usize },
    Gather { input: Var, index: Vec<usize> },
    /// Forward value supplied externally; gradient passes to `source` unchanged.
    Straight { source: Var },
    /// Row-wise mixture of fake-quantized copies of `input`, weighted by
    /// the rows of `selection` (one column per bit-width option).
    QuantSelect {
        input: Var,
        selection: Var,
        options: Vec<u32>,
        quantizer: RowQuantizer,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::MaxScalar(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::Reshape(a) => vec![*a],
            Op::Softmax { input, .. } | Op::SliceCols { input, .. } | Op::Gather { input, .. } => {
                vec![*input]
            }
            Op::Straight { source } => vec![*source],
            Op::QuantSelect { input, selection, .. } => vec![*input, *selection],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only computation record.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    let c = t.cols();
    (t.numel() / c, c)
}

// out[m×n] += a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[m×k] += g[m×n] · b[k×n]ᵀ
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// out[k×n] += a[m×k]ᵀ · g[m×n]
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn softmax_row(x: &[f64], tau: f64, out: &mut [f64]) {
    let m = x.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = math::exp((v - m) / tau);
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Numerically stable `softmax(x / tau)` of a plain slice.
pub fn softmax(x: &[f64], tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_row(x, tau, &mut out);
    out
}

fn one_hot_index(row: &[f64]) -> Option<usize> {
    let mut hot = None;
    for (i, &v) in row.iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(i);
        } else if v != 0.0 {
            return None;
        }
    }
    hot
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        let value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor; it participates in differentiation iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a tensor that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// True when `target` is reachable from `from` by following op inputs.
    pub fn depends_on(&self, from: Var, target: Var) -> bool {
        if target.0 > from.0 {
            return false;
        }
        let mut seen = vec![false; from.0 + 1];
        let mut stack = vec![from];
        while let Some(v) = stack.pop() {
            if v == target {
                return true;
            }
            if core::mem::replace(&mut seen[v.0], true) {
                continue;
            }
            stack.extend(self.nodes[v.0].op.inputs().into_iter().filter(|i| i.0 >= target.0));
        }
        false
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(ta.shape(), data)?
        } else if tb.is_scalar() {
            let y = tb.data()[0];
            Tensor::new(ta.shape(), ta.data().iter().map(|x| f(*x, y)).collect())?
        } else if ta.is_scalar() {
            let x = ta.data()[0];
            Tensor::new(tb.shape(), tb.data().iter().map(|y| f(x, *y)).collect())?
        } else {
            return Err(dim_err("elementwise", ta, tb));
        };
        Ok(self.push(value, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let v = Tensor::new(t.shape(), t.data().iter().map(|x| f(*x)).collect()).unwrap();
        self.push(v, op)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::MulScalar(a, c), |x| x * c)
    }

    /// `a[m×n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = rows_cols(ta);
        if tr.numel() != n {
            return Err(dim_err("add_row", ta, tr));
        }
        let mut out = ta.data().to_vec();
        for i in 0..m {
            for (o, r) in out[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddRow(a, row)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), math::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|x| !(**x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: alloc::format!("non-positive argument {bad}"),
            });
        }
        Ok(self.map(a, Op::Log(a), math::ln))
    }

    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::MaxScalar(a, c), |x| if x > c { x } else { c })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Row sums of an `[m×n]` tensor, giving `[m]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = rows_cols(t);
        let data = (0..m).map(|i| t.data()[i * n..(i + 1) * n].iter().sum()).collect();
        self.push(Tensor::new(&[m], data).unwrap(), Op::SumRows(a))
    }

    /// Row-wise `softmax(x / tau)` over the last dimension.
    pub fn softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(contract("softmax temperature must be positive"));
        }
        let t = self.value(a);
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let (m, n) = rows_cols(t);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(&t.data()[i * n..(i + 1) * n], tau, &mut out[i * n..(i + 1) * n]);
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { input: a, tau }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Columns `start..start + len` of an `[m×n]` tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = rows_cols(t);
        if t.shape().len() != 2 || len == 0 || start + len > n {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Tensor::new(&[m, len], out)?, Op::SliceCols { input: a, start }))
    }

    /// Picks `x[i, index[i]]` for each row, giving `[m]`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = rows_cols(t);
        if index.len() != m || index.iter().any(|&j| j >= n) {
            return Err(Error::Dimension {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![index.len()],
            });
        }
        let data = index.iter().enumerate().map(|(i, &j)| t.data()[i * n + j]).collect();
        Ok(self.push(
            Tensor::new(&[m], data)?,
            Op::Gather {
                input: a,
                index: index.to_vec(),
            },
        ))
    }

    /// Straight-through estimator: the output carries the bits of
    /// `forward_value` while gradients flow to `source` as the identity.
    /// `forward_value` itself never receives gradient.
    pub fn ste_passthrough(&mut self, forward_value: Var, source: Var) -> Result<Var> {
        let (f, s) = (self.value(forward_value), self.value(source));
        if f.shape() != s.shape() {
            return Err(dim_err("ste_passthrough", f, s));
        }
        let v = Tensor::new(f.shape(), f.data().to_vec())?;
        Ok(self.push(v, Op::Straight { source }))
    }

    /// Dynamic per-row activation quantization with a selectable width.
    ///
    /// `input` is `[m×n]`, `selection` is `[m×O]` with one column per entry
    /// of `options`. Row `i` of the output is
    /// `sum_k selection[i,k] * fq(input[i,:], options[k])`, which for a
    /// one-hot selection is exactly the fake-quantized row. The input
    /// gradient is straight-through; the selection gradient is the inner
    /// product of the upstream gradient with each candidate quantization.
    /// Returns the specs used for one-hot rows (`None` for mixed rows).
    pub fn quant_select(
        &mut self,
        input: Var,
        selection: Var,
        options: &[u32],
        quantizer: RowQuantizer,
    ) -> Result<(Var, Vec<Option<QuantSpec>>)> {
        let (tx, ts) = (self.value(input), self.value(selection));
        let (m, n) = rows_cols(tx);
        if ts.shape().len() != 2 || ts.shape()[0] != m || ts.shape()[1] != options.len() {
            return Err(dim_err("quant_select", tx, ts));
        }
        let o = options.len();
        let mut out = vec![0.0; m * n];
        let mut specs = Vec::with_capacity(m);
        let mut scratch = vec![0.0; n];
        for i in 0..m {
            let xr = &tx.data()[i * n..(i + 1) * n];
            let sr = &ts.data()[i * o..(i + 1) * o];
            let orow = &mut out[i * n..(i + 1) * n];
            if let Some(k) = one_hot_index(sr) {
                specs.push(Some(quant::fake_quantize_into(
                    xr,
                    quantizer.scheme,
                    options[k],
                    quantizer.rule,
                    orow,
                )?));
            } else {
                for (k, &w) in sr.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    quant::fake_quantize_into(xr, quantizer.scheme, options[k], quantizer.rule, &mut scratch)?;
                    for (o, q) in orow.iter_mut().zip(&scratch) {
                        *o += w * q;
                    }
                }
                specs.push(None);
            }
        }
        let shape = tx.shape().to_vec();
        let var = self.push(
            Tensor::new(&shape, out)?,
            Op::QuantSelect {
                input,
                selection,
                options: options.to_vec(),
                quantizer,
            },
        );
        Ok((var, specs))
    }

    /// Reverse sweep from a scalar `loss`, adding the resulting gradients
    /// into every node that requires grad. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(contract("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            let node = &mut self.nodes[idx];
            match node.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let nodes = &self.nodes;
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                send(*a, &mut |s| gemm_nt(g, tb.data(), s, m, k, n));
                send(*b, &mut |s| gemm_tn(ta.data(), g, s, m, k, n));
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let kind = *kind;
                // d/da and d/db of one output element
                let partial = |i: usize, wrt_a: bool| -> f64 {
                    let xa = if ta.is_scalar() { ta.data()[0] } else { ta.data()[i] };
                    let xb = if tb.is_scalar() { tb.data()[0] } else { tb.data()[i] };
                    match (kind, wrt_a) {
                        (BinaryKind::Add, _) => 1.0,
                        (BinaryKind::Sub, true) => 1.0,
                        (BinaryKind::Sub, false) => -1.0,
                        (BinaryKind::Mul, true) => xb,
                        (BinaryKind::Mul, false) => xa,
                    }
                };
                let same = ta.shape() == tb.shape();
                for (var, t, wrt_a) in [(*a, ta, true), (*b, tb, false)] {
                    let reduce = !same && t.is_scalar() && g.len() > 1;
                    send(var, &mut |s| {
                        if reduce {
                            s[0] += g.iter().enumerate().map(|(i, gv)| gv * partial(i, wrt_a)).sum::<f64>();
                        } else {
                            for (i, (sv, gv)) in s.iter_mut().zip(g).enumerate() {
                                *sv += gv * partial(i, wrt_a);
                            }
                        }
                    });
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(sv, gv)| *sv += gv)
            }),
            Op::MulScalar(a, c) => send(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(sv, gv)| *sv += gv * c)
            }),
            Op::AddRow(a, r) => {
                let n = nodes[r.0].value.numel();
                send(*a, &mut |s| s.iter_mut().zip(g).for_each(|(sv, gv)| *sv += gv));
                send(*r, &mut |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % n] += gv;
                    }
                });
            }
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                send(*a, &mut |s| {
                    for ((sv, gv), xv) in s.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *sv += gv;
                        }
                    }
                });
            }
            Op::Exp(a) => send(*a, &mut |s| {
                for ((sv, gv), y) in s.iter_mut().zip(g).zip(out) {
                    *sv += gv * y;
                }
            }),
            Op::Log(a) => {
                let x = nodes[a.0].value.data();
                send(*a, &mut |s| {
                    for ((sv, gv), xv) in s.iter_mut().zip(g).zip(x) {
                        *sv += gv / xv;
                    }
                });
            }
            Op::MaxScalar(a, c) => {
                let x = nodes[a.0].value.data();
                send(*a, &mut |s| {
                    for ((sv, gv), xv) in s.iter_mut().zip(g).zip(x) {
                        if xv > c {
                            *sv += gv;
                        }
                    }
                });
            }
            Op::Sum(a) => send(*a, &mut |s| s.iter_mut().for_each(|sv| *sv += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.numel() as f64;
                send(*a, &mut |s| s.iter_mut().for_each(|sv| *sv += g[0] / n));
            }
            Op::SumRows(a) => {
                let n = nodes[a.0].value.cols();
                send(*a, &mut |s| {
                    for (i, sv) in s.iter_mut().enumerate() {
                        *sv += g[i / n];
                    }
                });
            }
            Op::Softmax { input, tau } => {
                let n = node.value.cols();
                send(*input, &mut |s| {
                    for (r, (yr, gr)) in out.chunks(n).zip(g.chunks(n)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                        for j in 0..n {
                            s[r * n + j] += yr[j] * (gr[j] - dot) / tau;
                        }
                    }
                });
            }
            Op::SliceCols { input, start } => {
                let n = nodes[input.0].value.cols();
                let len = node.value.cols();
                send(*input, &mut |s| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        for (j, gv) in gr.iter().enumerate() {
                            s[r * n + start + j] += gv;
                        }
                    }
                });
            }
            Op::Gather { input, index } => {
                let n = nodes[input.0].value.cols();
                send(*input, &mut |s| {
                    for (r, (&j, gv)) in index.iter().zip(g).enumerate() {
                        s[r * n + j] += gv;
                    }
                });
            }
            Op::Straight { source } => send(*source, &mut |s| {
                s.iter_mut().zip(g).for_each(|(sv, gv)| *sv += gv)
            }),
            Op::QuantSelect {
                input,
                selection,
                options,
                quantizer,
            } => {
                let tx = &nodes[input.0].value;
                let ts = &nodes[selection.0].value;
                let n = tx.cols();
                let o = options.len();
                send(*input, &mut |s| {
                    for (r, gr) in g.chunks(n).enumerate() {
                        let w: f64 = ts.data()[r * o..(r + 1) * o].iter().sum();
                        for (j, gv) in gr.iter().enumerate() {
                            s[r * n + j] += w * gv;
                        }
                    }
                });
                let mut err = None;
                send(*selection, &mut |s| {
                    let mut scratch = vec![0.0; n];
                    for (r, gr) in g.chunks(n).enumerate() {
                        let xr = &tx.data()[r * n..(r + 1) * n];
                        for (k, &bits) in options.iter().enumerate() {
                            if let Err(e) =
                                quant::fake_quantize_into(xr, quantizer.scheme, bits, quantizer.rule, &mut scratch)
                            {
                                err = Some(e);
                                return;
                            }
                            s[r * o + k] += gr.iter().zip(&scratch).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                if let Some(e) = err {
                    return Err(e);
                }
            }
        }
        Ok(())
    }
}
