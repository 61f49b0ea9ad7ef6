use std::fmt;
use std::sync::Arc;

use super::{Result, Tensor, TensorError};

/// Names of every built-in differentiable primitive recorded by [`Tape`].
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "relu",
    "tanh",
    "softmax",
    "sum",
    "mean",
    "transpose",
    "add_row",
    "slice_cols",
    "concat_cols",
    "concat_rows",
    "mean_rows",
    "cross_entropy",
];

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied primitive with its own backward rule.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradient contribution for each input, given the upstream gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    AddRow(Var, Var),
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Custom(Arc<dyn CustomOp>, Vec<Var>),
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Transpose(..) => "transpose",
            Op::AddRow(..) => "add_row",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom(op, _) => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Transpose(a)
            | Op::MeanRows(a) => vec![*a],
            Op::SliceCols { src, .. } => vec![*src],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) | Op::Custom(_, vs) => vs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of executed primitives.
///
/// Nodes are appended in execution order, so every node's inputs have
/// smaller indices and a reverse sweep over the node list is a reverse
/// topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("check_finite", &self.check_finite)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enables the non-finite check after every primitive.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = value.requires_grad;
        self.push_node(value, Op::Leaf, needs_grad)
    }

    /// Records a leaf that gradients are accumulated into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, populated by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].value.grad_tensor()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    /// Name of the primitive that produced `v` ("leaf" for inputs).
    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }

    fn push_node(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        let value = Tensor::new(shape, data)?;
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op.name().to_string(),
            });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_node(value, op, needs_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, p) = self.dims2(b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, p],
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, p);
        self.push(vec![m, p], data, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(self.value(a).shape().to_vec(), data, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(self.value(a).shape().to_vec(), data, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(self.value(a).shape().to_vec(), data, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        self.push(self.value(a).shape().to_vec(), data, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        self.push(self.value(a).shape().to_vec(), data, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.push(self.value(a).shape().to_vec(), data, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        self.push(self.value(a).shape().to_vec(), data, Op::Tanh(a))
    }

    /// Softmax over the last dimension, max-shifted for stability.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let width = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        self.push(t.shape().to_vec(), data, Op::Softmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(vec![], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum();
        let m = s / t.numel() as f64;
        self.push(vec![], vec![m], Op::Mean(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let data = transpose_raw(self.value(a).data(), r, c);
        self.push(vec![c, r], data, Op::Transpose(a))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let r = self.value(row);
        if r.numel() != n || r.rank() > 2 || (r.rank() == 2 && r.shape()[0] != 1) {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: vec![m, n],
                right: r.shape().to_vec(),
            });
        }
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(r.data()).for_each(|(x, b)| *x += b);
        }
        self.push(vec![m, n], data, Op::AddRow(a, row))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if start >= end || end > n {
            return Err(TensorError::Contract(format!(
                "slice_cols: range {start}..{end} invalid for {n} columns"
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        self.push(vec![m, end - start], data, Op::SliceCols { src: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols: no inputs".into()))?;
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(first).shape().to_vec(),
                    right: vec![pm, pn],
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(vec![m, total], data, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows: no inputs".into()))?;
        let (_, n) = self.dims2(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(first).shape().to_vec(),
                    right: vec![pm, pn],
                });
            }
            rows += pm;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(vec![rows, n], data, Op::ConcatRows(parts.to_vec()))
    }

    /// Column means of an `m x n` matrix, as a `1 x n` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let src = self.value(a).data();
        let mut data = vec![0.0; n];
        for i in 0..m {
            data.iter_mut().zip(&src[i * n..(i + 1) * n]).for_each(|(d, x)| *d += x);
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        self.push(vec![1, n], data, Op::MeanRows(a))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits`, computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits)?;
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![b, c],
                right: vec![labels.len()],
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Contract(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let z = self.value(logits).data();
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            total += log_sum_exp(row) - row[label];
        }
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
        };
        self.push(vec![], vec![total / b as f64], op)
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&values)?;
        let shape = out.shape().to_vec();
        self.push(shape, out.into_data(), Op::Custom(op, inputs.to_vec()))
    }

    /// Propagates d(loss)/d(node) back to every leaf that requires a gradient,
    /// adding into the leaf's existing gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj)?;
        }
        for (i, node) in self.nodes.iter_mut().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let g = adj[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.accumulate_grad(&g);
            }
        }
        // Leaves recorded after the loss cannot influence it.
        for node in self.nodes.iter_mut().skip(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let zeros = vec![0.0; node.value.numel()];
                node.value.accumulate_grad(&zeros);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let buf = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
            contrib(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let (_, p) = self.dims2(*b)?;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if needs(a) {
                    // dA = G * B^T
                    acc(*a, &|buf| {
                        for r in 0..m {
                            for c in 0..k {
                                let mut s = 0.0;
                                for j in 0..p {
                                    s += g[r * p + j] * bv[c * p + j];
                                }
                                buf[r * k + c] += s;
                            }
                        }
                    });
                }
                if needs(b) {
                    // dB = A^T * G
                    acc(*b, &|buf| {
                        for r in 0..k {
                            for c in 0..p {
                                let mut s = 0.0;
                                for j in 0..m {
                                    s += av[j * k + r] * g[j * p + c];
                                }
                                buf[r * p + c] += s;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &|buf| add_into(buf, g));
                acc(*b, &|buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|buf| add_into(buf, g));
                acc(*b, &|buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|buf| {
                    for (j, x) in buf.iter_mut().enumerate() {
                        *x += g[j] * bv[j];
                    }
                });
                acc(*b, &|buf| {
                    for (j, x) in buf.iter_mut().enumerate() {
                        *x += g[j] * av[j];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::AddScalar(a) => acc(*a, &|buf| add_into(buf, g)),
            Op::Relu(a) => {
                let av = self.value(*a).data();
                acc(*a, &|buf| {
                    for (j, x) in buf.iter_mut().enumerate() {
                        if av[j] > 0.0 {
                            *x += g[j];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = out.data();
                acc(*a, &|buf| {
                    for (j, x) in buf.iter_mut().enumerate() {
                        *x += g[j] * (1.0 - y[j] * y[j]);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = out.data();
                let width = *out.shape().last().unwrap_or(&1);
                acc(*a, &|buf| {
                    for start in (0..y.len()).step_by(width) {
                        let dot: f64 = (0..width).map(|j| g[start + j] * y[start + j]).sum();
                        for j in 0..width {
                            buf[start + j] += y[start + j] * (g[start + j] - dot);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|buf| buf.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                acc(*a, &|buf| buf.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims2(*a)?;
                // g is c x r
                acc(*a, &|buf| add_into(buf, &transpose_raw(g, c, r)));
            }
            Op::AddRow(a, row) => {
                let (_, n) = self.dims2(*a)?;
                acc(*a, &|buf| add_into(buf, g));
                acc(*row, &|buf| {
                    for chunk in g.chunks(n) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::SliceCols { src, start } => {
                let (m, n) = self.dims2(*src)?;
                let w = out.shape()[1];
                acc(*src, &|buf| {
                    for r in 0..m {
                        add_into(&mut buf[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let m = out.shape()[0];
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    acc(*p, &|buf| {
                        for r in 0..m {
                            add_into(&mut buf[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    acc(*p, &|buf| add_into(buf, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::MeanRows(a) => {
                let (m, n) = self.dims2(*a)?;
                acc(*a, &|buf| {
                    for chunk in buf.chunks_mut(n) {
                        chunk.iter_mut().zip(g).for_each(|(x, y)| *x += y / m as f64);
                    }
                });
            }
            Op::CrossEntropy { logits, labels } => {
                let (b, c) = self.dims2(*logits)?;
                let z = self.value(*logits).data();
                acc(*logits, &|buf| {
                    for (i, &label) in labels.iter().enumerate() {
                        let row = &z[i * c..(i + 1) * c];
                        let lse = log_sum_exp(row);
                        for j in 0..c {
                            let p = (row[j] - lse).exp();
                            let target = if j == label { 1.0 } else { 0.0 };
                            buf[i * c + j] += g[0] * (p - target) / b as f64;
                        }
                    }
                });
            }
            Op::Custom(op, inputs) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = op.backward(&values, out, g);
                if grads.len() != inputs.len() {
                    return Err(TensorError::Contract(format!(
                        "{}: backward returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (v, gi) in inputs.iter().zip(&grads) {
                    acc(*v, &|buf| add_into(buf, gi));
                }
            }
        }
        Ok(())
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    buf.iter_mut().zip(g).for_each(|(x, y)| *x += y);
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[l * p + j];
            }
            out[i * p + j] = s;
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(m(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);

        let i = tape.constant(Tensor::eye(2));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);

        let z = tape.constant(m(&[&[0.0, 0.0]]));
        let ones = tape.constant(m(&[&[1.0], &[1.0]]));
        let c = tape.matmul(z, ones).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0]);
        assert_eq!(tape.value(c).shape(), &[1, 1]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(TensorError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(&[1.0, 2.0]));
        let b = tape.constant(Tensor::vector(&[3.0, 4.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
        let z = tape.scale(a, 0.0).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0, 0.0]);
        let d = tape.sub(a, a).unwrap();
        assert_eq!(tape.value(d).data(), &[0.0, 0.0]);
        let p = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, 8.0]);
        let c = tape.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, c), Err(TensorError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(&[-1.0, 2.0]));
        let r = tape.relu(a).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let z = tape.constant(Tensor::vector(&[0.0, 0.0, 0.0]));
        let s = tape.softmax(z).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let t0 = tape.constant(Tensor::vector(&[0.0]));
        let t = tape.tanh(t0).unwrap();
        assert_eq!(tape.value(t).data(), &[0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(m(&[&[1.0, -3.0, 250.0], &[0.1, 0.2, 0.3]]));
        let s = tape.softmax(x).unwrap();
        for row in tape.value(s).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(&[1.0, 2.0, 3.0]));
        let l = tape.sum(w).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(&[1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0]);

        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(&[1.0, 2.0]));
        let c = tape.constant(Tensor::vector(&[5.0]));
        let l = tape.sum(c).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(&[0.3, -1.2]));
        let t = tape.tanh(w).unwrap();
        let sq = tape.mul(t, w).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        let once = tape.grad(w).unwrap().to_vec();
        tape.backward(l).unwrap();
        let twice = tape.grad(w).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn cross_entropy_is_stable_and_validates_labels() {
        let mut tape = Tape::new();
        let z = tape.constant(m(&[&[1000.0, 0.0]]));
        let l = tape.cross_entropy(z, &[0]).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-12);
        let l = tape.cross_entropy(z, &[1]).unwrap();
        assert!((tape.value(l).item().unwrap() - 1000.0).abs() < 1e-9);
        assert!(matches!(tape.cross_entropy(z, &[2]), Err(TensorError::Contract(_))));
    }

    #[test]
    fn finite_check_reports_the_primitive() {
        let mut tape = Tape::new().with_finite_check(true);
        let x = tape.constant(Tensor::vector(&[f64::MAX]));
        let err = tape.scale(x, 10.0).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "scale".into() });

        let mut unchecked = Tape::new();
        let x = unchecked.constant(Tensor::vector(&[f64::MAX]));
        assert!(unchecked.scale(x, 10.0).is_ok());
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut tape = Tape::new();
        let w0 = tape.constant(m(&[&[1.0, 2.0]]));
        let a = tape.param(m(&[&[3.0], &[4.0]]));
        let y = tape.matmul(w0, a).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(w0).is_none());
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 2.0]);
        assert_eq!(tape.op_name(y), "matmul");
    }
}
