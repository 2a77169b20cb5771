//! Operation tape and reverse-mode gradient accumulation.
//!
//! Every differentiable op appends one node holding its inputs, output
//! values and enough metadata to run its local backward rule. A node is
//! recorded only when at least one operand is attached, so forward passes
//! over detached values (evaluation, frozen teachers) cost no tape space.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use super::{element_count, ensure_finite, Tensor, TensorError};

pub type NodeId = usize;

/// Single-input op with a caller-supplied backward rule. `backward` receives
/// the upstream gradient and the saved input values and returns the gradient
/// with respect to the input, matching its length.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, upstream: &[f64], input: &[f64]) -> Vec<f64>;
}

enum Op {
    Leaf,
    /// Recorded constant operand; receives no gradient.
    Constant,
    MatMul,
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Scale(f64),
    Sum(Option<usize>),
    Mean(Option<usize>),
    LogSoftmax,
    GatherRows(Vec<usize>),
    ConcatRows,
    ConcatCols,
    SliceRows(usize),
    SliceCols(usize, usize),
    Transpose,
    Reshape,
    Custom(Box<dyn CustomOp>),
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
}

/// Gradients of one backward pass, keyed by leaf node handle.
/// A leaf missing from the map has an all-zero gradient.
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(&node)
    }

    /// Gradient for a tensor's node, if it is a leaf that received one.
    pub fn for_tensor(&self, t: &Tensor) -> Option<&Tensor> {
        t.node().and_then(|n| self.grads.get(&n))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Broadcast form accepted by binary elementwise ops: equal shapes, or a
/// rank-1 right operand whose length matches the left's trailing axis.
enum Pair {
    Equal,
    TrailingVec,
}

fn pair_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Pair, TensorError> {
    if a.shape() == b.shape() {
        return Ok(Pair::Equal);
    }
    if b.rank() == 1 && a.rank() >= 1 && a.shape()[a.rank() - 1] == b.shape()[0] {
        return Ok(Pair::TrailingVec);
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, node: Node) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Records a differentiable input. Parameters and checked inputs enter
    /// the tape through here; everything else stays a constant.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let values = t.values_arc();
        let id = self.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: t.shape().to_vec(),
            values: Arc::clone(&values),
        });
        Tensor::from_arc(t.shape().to_vec(), values, Some(id))
    }

    /// Node id for an operand, recording detached operands as constants.
    fn operand(&self, t: &Tensor) -> NodeId {
        match t.node() {
            Some(id) => id,
            None => self.push(Node {
                op: Op::Constant,
                inputs: vec![],
                shape: t.shape().to_vec(),
                values: t.values_arc(),
            }),
        }
    }

    /// Finishes an op: skips recording when no operand is attached.
    fn emit(
        &self,
        op: Op,
        name: &str,
        operands: &[&Tensor],
        shape: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Tensor, TensorError> {
        ensure_finite(name, &values)?;
        let values = Arc::new(values);
        if operands.iter().all(|t| t.node().is_none()) {
            return Ok(Tensor::from_arc(shape, values, None));
        }
        let inputs: Vec<NodeId> = operands.iter().map(|t| self.operand(t)).collect();
        let id = self.push(Node {
            op,
            inputs,
            shape: shape.clone(),
            values: Arc::clone(&values),
        });
        Ok(Tensor::from_arc(shape, values, Some(id)))
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; n * m];
        let av = a.values();
        let bv = b.values();
        for i in 0..n {
            for l in 0..k {
                let x = av[i * k + l];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[l * m..(l + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for j in 0..m {
                    orow[j] += x * brow[j];
                }
            }
        }
        self.emit(Op::MatMul, "matmul", &[a, b], vec![n, m], out)
    }

    fn binary(
        &self,
        op: Op,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let kind = pair_kind(name, a, b)?;
        let values = match kind {
            Pair::Equal => a
                .values()
                .iter()
                .zip(b.values())
                .map(|(x, y)| f(*x, *y))
                .collect(),
            Pair::TrailingVec => {
                let m = b.len();
                a.values()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| f(*x, b.values()[i % m]))
                    .collect()
            }
        };
        self.emit(op, name, &[a, b], a.shape().to_vec(), values)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    fn unary(
        &self,
        op: Op,
        name: &'static str,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let values = a.values().iter().map(|x| f(*x)).collect();
        self.emit(op, name, &[a], a.shape().to_vec(), values)
    }

    pub fn tanh(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.unary(Op::Tanh, "tanh", a, f64::tanh)
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.unary(Op::Sigmoid, "sigmoid", a, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.unary(Op::Relu, "relu", a, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.unary(Op::Exp, "exp", a, f64::exp)
    }

    pub fn log(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        if a.values().iter().any(|v| *v <= 0.0) {
            return Err(TensorError::LogDomain);
        }
        self.unary(Op::Log, "log", a, f64::ln)
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        self.unary(Op::Scale(c), "scale", a, |x| c * x)
    }

    fn reduce(
        &self,
        op: Op,
        name: &'static str,
        a: &Tensor,
        axis: Option<usize>,
        mean: bool,
    ) -> Result<Tensor, TensorError> {
        match axis {
            None => {
                let mut s: f64 = a.values().iter().sum();
                if mean {
                    s /= a.len() as f64;
                }
                self.emit(op, name, &[a], vec![], vec![s])
            }
            Some(ax) => {
                if a.rank() != 2 || ax > 1 {
                    return Err(TensorError::InvalidAxis {
                        op: name,
                        axis: ax,
                        shape: a.shape().to_vec(),
                    });
                }
                let (n, m) = (a.rows(), a.cols());
                let (out_len, denom) = if ax == 0 { (m, n) } else { (n, m) };
                let mut out = vec![0.0; out_len];
                for i in 0..n {
                    for j in 0..m {
                        out[if ax == 0 { j } else { i }] += a.at2(i, j);
                    }
                }
                if mean {
                    for v in &mut out {
                        *v /= denom as f64;
                    }
                }
                self.emit(op, name, &[a], vec![out_len], out)
            }
        }
    }

    /// Sum over one axis of a rank-2 tensor, or over all values (`None`).
    pub fn sum(&self, a: &Tensor, axis: Option<usize>) -> Result<Tensor, TensorError> {
        self.reduce(Op::Sum(axis), "sum", a, axis, false)
    }

    pub fn mean(&self, a: &Tensor, axis: Option<usize>) -> Result<Tensor, TensorError> {
        self.reduce(Op::Mean(axis), "mean", a, axis, true)
    }

    /// Row-wise log-softmax over the last axis, max-shifted for stability.
    pub fn log_softmax(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        let (rows, cols) = match a.rank() {
            1 => (1, a.len()),
            2 => (a.rows(), a.cols()),
            _ => {
                return Err(TensorError::InvalidAxis {
                    op: "log_softmax",
                    axis: a.rank(),
                    shape: a.shape().to_vec(),
                })
            }
        };
        let mut out = vec![0.0; a.len()];
        for r in 0..rows {
            let row = &a.values()[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for c in 0..cols {
                out[r * cols + c] = row[c] - lse;
            }
        }
        self.emit(Op::LogSoftmax, "log_softmax", &[a], a.shape().to_vec(), out)
    }

    /// Selects rows of `a` by index; duplicate indices are allowed and their
    /// gradients accumulate into the same source row.
    pub fn gather_rows(&self, a: &Tensor, idx: &[usize]) -> Result<Tensor, TensorError> {
        if a.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                lhs: a.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let (n, m) = (a.rows(), a.cols());
        if let Some(bad) = idx.iter().find(|i| **i >= n) {
            return Err(TensorError::InvalidAxis {
                op: "gather_rows",
                axis: *bad,
                shape: a.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(idx.len() * m);
        for i in idx {
            out.extend_from_slice(&a.values()[i * m..(i + 1) * m]);
        }
        self.emit(
            Op::GatherRows(idx.to_vec()),
            "gather_rows",
            &[a],
            vec![idx.len(), m],
            out,
        )
    }

    /// Concatenates rank-2 tensors with equal column counts along axis 0.
    pub fn concat_rows(&self, parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let m = parts[0].cols();
        let mut rows = 0;
        for p in parts {
            if p.rank() != 2 || p.cols() != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += p.rows();
        }
        let mut out = Vec::with_capacity(rows * m);
        for p in parts {
            out.extend_from_slice(p.values());
        }
        self.emit(Op::ConcatRows, "concat_rows", parts, vec![rows, m], out)
    }

    /// Concatenates two rank-2 tensors with equal row counts along axis 1.
    pub fn concat_cols(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (n, ma, mb) = (a.rows(), a.cols(), b.cols());
        let mut out = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            out.extend_from_slice(&a.values()[i * ma..(i + 1) * ma]);
            out.extend_from_slice(&b.values()[i * mb..(i + 1) * mb]);
        }
        self.emit(
            Op::ConcatCols,
            "concat_cols",
            &[a, b],
            vec![n, ma + mb],
            out,
        )
    }

    pub fn slice_rows(&self, a: &Tensor, r0: usize, r1: usize) -> Result<Tensor, TensorError> {
        if a.rank() != 2 || r0 >= r1 || r1 > a.rows() {
            return Err(TensorError::InvalidAxis {
                op: "slice_rows",
                axis: r1,
                shape: a.shape().to_vec(),
            });
        }
        let m = a.cols();
        let out = a.values()[r0 * m..r1 * m].to_vec();
        self.emit(Op::SliceRows(r0), "slice_rows", &[a], vec![r1 - r0, m], out)
    }

    pub fn slice_cols(&self, a: &Tensor, c0: usize, c1: usize) -> Result<Tensor, TensorError> {
        if a.rank() != 2 || c0 >= c1 || c1 > a.cols() {
            return Err(TensorError::InvalidAxis {
                op: "slice_cols",
                axis: c1,
                shape: a.shape().to_vec(),
            });
        }
        let (n, m) = (a.rows(), a.cols());
        let mut out = Vec::with_capacity(n * (c1 - c0));
        for i in 0..n {
            out.extend_from_slice(&a.values()[i * m + c0..i * m + c1]);
        }
        self.emit(
            Op::SliceCols(c0, c1),
            "slice_cols",
            &[a],
            vec![n, c1 - c0],
            out,
        )
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        if a.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, m) = (a.rows(), a.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = a.at2(i, j);
            }
        }
        self.emit(Op::Transpose, "transpose", &[a], vec![m, n], out)
    }

    pub fn reshape(&self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        if element_count(&shape) != a.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected: a.len(),
                got: element_count(&a.shape),
            });
        }
        self.emit(Op::Reshape, "reshape", &[a], shape, a.values().to_vec())
    }

    /// Records a scalar-output custom op whose backward rule lives with the
    /// caller. `value` must be the op's output at `input`.
    pub fn custom(
        &self,
        op: Box<dyn CustomOp>,
        input: &Tensor,
        value: f64,
    ) -> Result<Tensor, TensorError> {
        let name = op.name();
        self.emit(Op::Custom(op), name, &[input], vec![], vec![value])
    }

    /// Reverse pass from a scalar loss. Each node is visited once, in
    /// reverse tape order; the map holds gradients for leaves only.
    /// The tape is consumed: a second backward on it is an error.
    pub fn backward(&self, loss: &Tensor) -> Result<GradientMap, TensorError> {
        if !loss.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        let root = loss.node().ok_or(TensorError::DetachedLoss)?;
        if self.consumed.replace(true) {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let Some(up) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(up);
                continue;
            }
            if matches!(node.op, Op::Constant) {
                continue;
            }
            let mut sink = |idx: usize, add: &dyn Fn(&mut [f64])| {
                let input = node.inputs[idx];
                if matches!(nodes[input].op, Op::Constant) {
                    return;
                }
                let slot = grads[input].get_or_insert_with(|| vec![0.0; nodes[input].values.len()]);
                add(slot.as_mut_slice());
            };
            let in_vals = |idx: usize| -> &[f64] { &nodes[node.inputs[idx]].values };
            let in_shape = |idx: usize| -> &[usize] { &nodes[node.inputs[idx]].shape };

            match &node.op {
                Op::Leaf | Op::Constant => unreachable!(),
                Op::MatMul => {
                    let (n, k) = (in_shape(0)[0], in_shape(0)[1]);
                    let m = in_shape(1)[1];
                    let a = in_vals(0);
                    let b = in_vals(1);
                    sink(0, &|g: &mut [f64]| {
                        for i in 0..n {
                            for l in 0..k {
                                let mut acc = 0.0;
                                for j in 0..m {
                                    acc += up[i * m + j] * b[l * m + j];
                                }
                                g[i * k + l] += acc;
                            }
                        }
                    });
                    sink(1, &|g: &mut [f64]| {
                        for l in 0..k {
                            for i in 0..n {
                                let x = a[i * k + l];
                                if x == 0.0 {
                                    continue;
                                }
                                for j in 0..m {
                                    g[l * m + j] += x * up[i * m + j];
                                }
                            }
                        }
                    });
                }
                Op::Add | Op::Sub => {
                    let sign = if matches!(node.op, Op::Sub) {
                        -1.0
                    } else {
                        1.0
                    };
                    sink(0, &|g: &mut [f64]| {
                        for (gi, u) in g.iter_mut().zip(&up) {
                            *gi += u;
                        }
                    });
                    let bl = in_vals(1).len();
                    sink(1, &|g: &mut [f64]| {
                        if bl == up.len() {
                            for (gi, u) in g.iter_mut().zip(&up) {
                                *gi += sign * u;
                            }
                        } else {
                            for (i, u) in up.iter().enumerate() {
                                g[i % bl] += sign * u;
                            }
                        }
                    });
                }
                Op::Mul => {
                    let a = in_vals(0);
                    let b = in_vals(1);
                    let bl = b.len();
                    sink(0, &|g: &mut [f64]| {
                        for (i, u) in up.iter().enumerate() {
                            g[i] += u * b[i % bl];
                        }
                    });
                    sink(1, &|g: &mut [f64]| {
                        for (i, u) in up.iter().enumerate() {
                            g[i % bl] += u * a[i];
                        }
                    });
                }
                Op::Tanh => {
                    let y = &node.values;
                    sink(0, &|g: &mut [f64]| {
                        for (i, u) in up.iter().enumerate() {
                            g[i] += u * (1.0 - y[i] * y[i]);
                        }
                    });
                }
                Op::Sigmoid => {
                    let y = &node.values;
                    sink(0, &|g: &mut [f64]| {
                        for (i, u) in up.iter().enumerate() {
                            g[i] += u * y[i] * (1.0 - y[i]);
                        }
                    });
                }
                Op::Relu => {
                    // Derivative at exactly zero is defined as zero.
                    let x = in_vals(0);
                    sink(0, &|g: &mut [f64]| {
                        for (i, u) in up.iter().enumerate() {
                            if x[i] > 0.0 {
                                g[i] += u;
                            }
                        }
                    });
                }
                Op::Exp => {
                    let y = &node.values;
                    sink(0, &|g: &mut [f64]| {
                        for (i, u) in up.iter().enumerate() {
                            g[i] += u * y[i];
                        }
                    });
                }
                Op::Log => {
                    let x = in_vals(0);
                    sink(0, &|g: &mut [f64]| {
                        for (i, u) in up.iter().enumerate() {
                            g[i] += u / x[i];
                        }
                    });
                }
                Op::Scale(c) => {
                    let c = *c;
                    sink(0, &|g: &mut [f64]| {
                        for (i, u) in up.iter().enumerate() {
                            g[i] += c * u;
                        }
                    });
                }
                Op::Sum(axis) | Op::Mean(axis) => {
                    let mean = matches!(node.op, Op::Mean(_));
                    let shape = in_shape(0).to_vec();
                    let total = in_vals(0).len();
                    match axis {
                        None => {
                            let u = up[0] * if mean { 1.0 / total as f64 } else { 1.0 };
                            sink(0, &|g: &mut [f64]| {
                                for gi in g.iter_mut() {
                                    *gi += u;
                                }
                            });
                        }
                        Some(ax) => {
                            let (n, m) = (shape[0], shape[1]);
                            let denom = if *ax == 0 { n } else { m };
                            let scale = if mean { 1.0 / denom as f64 } else { 1.0 };
                            let ax = *ax;
                            sink(0, &|g: &mut [f64]| {
                                for i in 0..n {
                                    for j in 0..m {
                                        let u = up[if ax == 0 { j } else { i }];
                                        g[i * m + j] += scale * u;
                                    }
                                }
                            });
                        }
                    }
                }
                Op::LogSoftmax => {
                    let y = &node.values;
                    let cols = *node.shape.last().unwrap();
                    let rows = y.len() / cols;
                    sink(0, &|g: &mut [f64]| {
                        for r in 0..rows {
                            let urow = &up[r * cols..(r + 1) * cols];
                            let usum: f64 = urow.iter().sum();
                            for c in 0..cols {
                                let i = r * cols + c;
                                g[i] += urow[c] - y[i].exp() * usum;
                            }
                        }
                    });
                }
                Op::GatherRows(idx) => {
                    let m = node.shape[1];
                    sink(0, &|g: &mut [f64]| {
                        for (r, src) in idx.iter().enumerate() {
                            for j in 0..m {
                                g[src * m + j] += up[r * m + j];
                            }
                        }
                    });
                }
                Op::ConcatRows => {
                    let m = node.shape[1];
                    let mut row0 = 0;
                    for idx in 0..node.inputs.len() {
                        let rows = in_shape(idx)[0];
                        let start = row0 * m;
                        sink(idx, &|g: &mut [f64]| {
                            for (gi, u) in g.iter_mut().zip(&up[start..start + rows * m]) {
                                *gi += u;
                            }
                        });
                        row0 += rows;
                    }
                }
                Op::ConcatCols => {
                    let n = node.shape[0];
                    let ma = in_shape(0)[1];
                    let mb = in_shape(1)[1];
                    let m = ma + mb;
                    sink(0, &|g: &mut [f64]| {
                        for i in 0..n {
                            for j in 0..ma {
                                g[i * ma + j] += up[i * m + j];
                            }
                        }
                    });
                    sink(1, &|g: &mut [f64]| {
                        for i in 0..n {
                            for j in 0..mb {
                                g[i * mb + j] += up[i * m + ma + j];
                            }
                        }
                    });
                }
                Op::SliceRows(r0) => {
                    let m = node.shape[1];
                    let off = r0 * m;
                    sink(0, &|g: &mut [f64]| {
                        for (j, u) in up.iter().enumerate() {
                            g[off + j] += u;
                        }
                    });
                }
                Op::SliceCols(c0, c1) => {
                    let n = node.shape[0];
                    let w = c1 - c0;
                    let m = in_shape(0)[1];
                    sink(0, &|g: &mut [f64]| {
                        for i in 0..n {
                            for j in 0..w {
                                g[i * m + c0 + j] += up[i * w + j];
                            }
                        }
                    });
                }
                Op::Transpose => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    sink(0, &|g: &mut [f64]| {
                        for i in 0..m {
                            for j in 0..n {
                                g[j * m + i] += up[i * n + j];
                            }
                        }
                    });
                }
                Op::Reshape => {
                    sink(0, &|g: &mut [f64]| {
                        for (gi, u) in g.iter_mut().zip(&up) {
                            *gi += u;
                        }
                    });
                }
                Op::Custom(op) => {
                    let dx = op.backward(&up, in_vals(0));
                    assert_eq!(dx.len(), in_vals(0).len(), "{} backward length", op.name());
                    sink(0, &|g: &mut [f64]| {
                        for (gi, u) in g.iter_mut().zip(&dx) {
                            *gi += u;
                        }
                    });
                }
            }
        }

        let mut map = GradientMap::default();
        for (id, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &nodes[id].op) {
                let shape = nodes[id].shape.clone();
                map.grads
                    .insert(id, Tensor::from_arc(shape, Arc::new(g), None));
            }
        }
        Ok(map)
    }
}
