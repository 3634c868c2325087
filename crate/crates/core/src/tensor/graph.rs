//! Reverse-mode differentiation graph over [`Tensor`] values.
//!
//! Nodes are appended in construction order, which is already a topological
//! order, so the backward pass is a single reverse sweep. The primitive set is
//! closed; each primitive validates its shape rule and rejects non-finite
//! outputs.

use super::{axis_split, Result, Tensor, TensorError};

/// Handle to a node inside one [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize, len: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm { src: Var, axis: usize, eps: f64 },
    Mean(Var, Option<usize>),
    Sum(Var, Option<usize>),
    Transpose(Var),
    MaskAdd { scores: Var, mask: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only record of primitive applications, traversed in reverse by
/// [`Graph::backward`]. Single-threaded during construction and backward.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts an input tensor. Gradients accumulate here when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Inserts a constant input that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the latest [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    // ── primitives ───────────────────────────────────────────────────

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_fwd(self.value(a), self.value(b))?;
        self.record("matmul", out, Op::Matmul(a, b), &[a, b])
    }

    /// Elementwise sum. The right operand may also be a trailing-axes shape of
    /// the left (e.g. a bias row added to every row of a matrix).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.record("add", out, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product, with the same trailing-axes broadcast rule as `add`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip("multiply", self.value(a), self.value(b), |x, y| x * y)?;
        self.record("multiply", out, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise difference of same-shape tensors.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("subtract", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.record("subtract", out, Op::Sub(a, b), &[a, b])
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.record("scale", out, Op::Scale(a, factor), &[a])
    }

    /// Concatenation along `axis`; inputs must agree on every other extent.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(TensorError::Contract("concat requires at least one input".into()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::Contract(format!(
                "concat axis {} out of range for rank {}",
                axis,
                first.len()
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    details: format!("{:?} vs {:?} along axis {}", s, first, axis),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let n = t.shape()[axis];
                let base = o * n * inner;
                data.extend_from_slice(&t.data()[base..base + n * inner]);
            }
        }
        let out = Tensor::from_parts(out_shape, data);
        self.record("concat", out, Op::Concat(inputs.to_vec(), axis), inputs)
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(TensorError::Contract(format!(
                "slice [{start}, {}) on axis {axis} out of range for shape {:?}",
                start + len,
                t.shape()
            )));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut out_shape = t.shape().to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let out = Tensor::from_parts(out_shape, data);
        self.record("slice", out, Op::Slice { src, axis, start, len }, &[src])
    }

    /// Row lookup: `table[ids[i], :]` stacked into `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(TensorError::Contract(format!(
                "embedding-lookup table must be rank 2, got {:?}",
                t.shape()
            )));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Contract(format!(
                "embedding-lookup id {bad} out of range for table with {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        self.record("embedding-lookup", out, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = map_unary(self.value(a), f64::tanh);
        self.record("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = map_unary(self.value(a), sigmoid);
        self.record("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    /// Gaussian error linear unit (tanh form).
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = map_unary(self.value(a), gelu);
        self.record("gelu", out, Op::Gelu(a), &[a])
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis("softmax", t, axis)?;
        let out = lane_map(t, axis, softmax_lane);
        self.record("softmax", out, Op::Softmax(a, axis), &[a])
    }

    /// Log-softmax along `axis`, computed with max subtraction.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis("log-softmax", t, axis)?;
        let out = lane_map(t, axis, log_softmax_lane);
        self.record("log-softmax", out, Op::LogSoftmax(a, axis), &[a])
    }

    /// Normalizes each lane along `axis` to zero mean and unit variance
    /// (biased variance, `eps` floor). Affine terms are separate primitives.
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let t = self.value(a);
        check_axis("layer-norm", t, axis)?;
        let out = lane_map(t, axis, |lane, out| layer_norm_lane(lane, out, eps));
        self.record("layer-norm", out, Op::LayerNorm { src: a, axis, eps }, &[a])
    }

    /// Mean over one axis, or over all elements (`None`) yielding a scalar.
    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(a);
        let out = reduce(t, axis, true)?;
        self.record("mean", out, Op::Mean(a, axis), &[a])
    }

    /// Sum over one axis, or over all elements (`None`) yielding a scalar.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(a);
        let out = reduce(t, axis, false)?;
        self.record("sum", out, Op::Sum(a, axis), &[a])
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(TensorError::Contract(format!(
                "transpose requires rank 2, got {:?}",
                t.shape()
            )));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t.data()[i * n + j];
            }
        }
        let out = Tensor::from_parts(vec![n, m], data);
        self.record("transpose", out, Op::Transpose(a), &[a])
    }

    /// Dot-product-attention mask add: `scores[i,j] + mask[j]` for rank-2
    /// scores and a rank-1 mask over key positions.
    pub fn mask_add(&mut self, scores: Var, mask: Var) -> Result<Var> {
        let (ts, tm) = (self.value(scores), self.value(mask));
        if ts.rank() != 2 || tm.rank() != 1 || ts.shape()[1] != tm.shape()[0] {
            return Err(shape_err("mask-add", ts, tm));
        }
        let out = broadcast_zip("mask-add", ts, tm, |x, y| x + y)?;
        self.record("mask-add", out, Op::MaskAdd { scores, mask }, &[scores, mask])
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a single-element `loss`. Fills `grad` for every leaf
    /// with `requires_grad`; leaves untouched by the loss get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            if !dy.is_finite() {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {
                    self.nodes[id].grad = Some(dy);
                }
                Op::Matmul(a, b) => {
                    // dA = dC·Bᵀ, dB = Aᵀ·dC
                    let da = matmul_nt(&dy, self.value(b));
                    let db = matmul_tn(self.value(a), &dy);
                    self.accumulate(&mut grads, a, da);
                    self.accumulate(&mut grads, b, db);
                }
                Op::Add(a, b) => {
                    let db = reduce_to_shape(&dy, self.value(b).shape());
                    self.accumulate(&mut grads, b, db);
                    self.accumulate(&mut grads, a, dy);
                }
                Op::MaskAdd { scores, mask } => {
                    let dm = reduce_to_shape(&dy, self.value(mask).shape());
                    self.accumulate(&mut grads, mask, dm);
                    self.accumulate(&mut grads, scores, dy);
                }
                Op::Mul(a, b) => {
                    let da = broadcast_zip("multiply", &dy, self.value(b), |g, y| g * y)?;
                    let full = zip_same(&dy, self.value(a), |g, x| g * x);
                    let db = reduce_to_shape(&full, self.value(b).shape());
                    self.accumulate(&mut grads, a, da);
                    self.accumulate(&mut grads, b, db);
                }
                Op::Sub(a, b) => {
                    let db = Tensor::from_parts(
                        dy.shape().to_vec(),
                        dy.data().iter().map(|g| -g).collect(),
                    );
                    self.accumulate(&mut grads, b, db);
                    self.accumulate(&mut grads, a, dy);
                }
                Op::Scale(a, factor) => {
                    let da = Tensor::from_parts(
                        dy.shape().to_vec(),
                        dy.data().iter().map(|g| g * factor).collect(),
                    );
                    self.accumulate(&mut grads, a, da);
                }
                Op::Concat(inputs, axis) => {
                    let mut offset = 0;
                    for &v in &inputs {
                        let n = self.value(v).shape()[axis];
                        let part = slice_kernel(&dy, axis, offset, n);
                        self.accumulate(&mut grads, v, part);
                        offset += n;
                    }
                }
                Op::Slice { src, axis, start, len } => {
                    let t = self.value(src);
                    let (outer, n, inner) = axis_split(t.shape(), axis);
                    let mut da = vec![0.0; t.numel()];
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let srcb = o * len * inner;
                        da[dst..dst + len * inner]
                            .copy_from_slice(&dy.data()[srcb..srcb + len * inner]);
                    }
                    self.accumulate(&mut grads, src, Tensor::from_parts(t.shape().to_vec(), da));
                }
                Op::Embedding { table, ids } => {
                    let t = self.value(table);
                    let d = t.shape()[1];
                    let mut da = vec![0.0; t.numel()];
                    for (row, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            da[id * d + c] += dy.data()[row * d + c];
                        }
                    }
                    self.accumulate(&mut grads, table, Tensor::from_parts(t.shape().to_vec(), da));
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    let da = zip_same(&dy, y, |g, y| g * (1.0 - y * y));
                    self.accumulate(&mut grads, a, da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[id].value;
                    let da = zip_same(&dy, y, |g, y| g * y * (1.0 - y));
                    self.accumulate(&mut grads, a, da);
                }
                Op::Gelu(a) => {
                    let x = self.value(a);
                    let da = zip_same(&dy, x, |g, x| g * gelu_deriv(x));
                    self.accumulate(&mut grads, a, da);
                }
                Op::Softmax(a, axis) => {
                    let y = &self.nodes[id].value;
                    let da = lane_zip(&dy, y, axis, |dy_lane, y_lane, out| {
                        let s: f64 = dy_lane.iter().zip(y_lane).map(|(g, y)| g * y).sum();
                        for ((o, g), y) in out.iter_mut().zip(dy_lane).zip(y_lane) {
                            *o = y * (g - s);
                        }
                    });
                    self.accumulate(&mut grads, a, da);
                }
                Op::LogSoftmax(a, axis) => {
                    let y = &self.nodes[id].value;
                    let da = lane_zip(&dy, y, axis, |dy_lane, y_lane, out| {
                        let s: f64 = dy_lane.iter().sum();
                        for ((o, g), y) in out.iter_mut().zip(dy_lane).zip(y_lane) {
                            *o = g - y.exp() * s;
                        }
                    });
                    self.accumulate(&mut grads, a, da);
                }
                Op::LayerNorm { src, axis, eps } => {
                    let x = self.value(src);
                    let da = lane_zip(&dy, x, axis, |dy_lane, x_lane, out| {
                        layer_norm_bwd_lane(dy_lane, x_lane, out, eps);
                    });
                    self.accumulate(&mut grads, src, da);
                }
                Op::Mean(a, axis) => {
                    let da = reduce_bwd(&dy, self.value(a).shape(), axis, true);
                    self.accumulate(&mut grads, a, da);
                }
                Op::Sum(a, axis) => {
                    let da = reduce_bwd(&dy, self.value(a).shape(), axis, false);
                    self.accumulate(&mut grads, a, da);
                }
                Op::Transpose(a) => {
                    let (m, n) = (dy.shape()[0], dy.shape()[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[j * m + i] = dy.data()[i * n + j];
                        }
                    }
                    self.accumulate(&mut grads, a, Tensor::from_parts(vec![n, m], da));
                }
            }
        }

        // Parameters the loss never touched still report zero gradients.
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}

// ── kernels ──────────────────────────────────────────────────────────

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        details: format!("{:?} vs {:?}", a.shape(), b.shape()),
    }
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if t.rank() == 0 || axis >= t.rank() {
        return Err(TensorError::Contract(format!(
            "{op}: axis {axis} out of range for shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn matmul_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(shape_err("matmul", a, b));
    }
    Ok(matmul_raw(a.data(), b.data(), a.shape()[0], a.shape()[1], b.shape()[1]))
}

/// `[m,k] · [k,n]`, row-major, ikj loop order.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Tensor {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// `A · Bᵀ` without materializing the transpose.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    debug_assert_eq!(b.shape()[1], k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data()[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// `Aᵀ · B` without materializing the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    debug_assert_eq!(b.shape()[0], m);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        let brow = &b.data()[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![k, n], out)
}

/// Elementwise zip where `b` is either the same shape as `a` or a trailing-axes
/// suffix of it (tiled over the leading axes).
fn broadcast_zip(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(zip_same_with(a, b, f));
    }
    let (ra, rb) = (a.rank(), b.rank());
    if rb < ra && a.shape()[ra - rb..] == *b.shape() {
        let inner = b.numel().max(1);
        let mut data = Vec::with_capacity(a.numel());
        if b.numel() == 0 {
            return Ok(Tensor::from_parts(a.shape().to_vec(), vec![]));
        }
        for chunk in a.data().chunks(inner) {
            data.extend(chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
        }
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    Err(shape_err(op, a, b))
}

fn zip_same_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    zip_same_with(a, b, f)
}

/// Sums `grad` down to `target` by folding leading broadcast axes.
fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let inner: usize = target.iter().product();
    let mut data = vec![0.0; inner];
    if inner > 0 {
        for chunk in grad.data().chunks(inner) {
            for (d, c) in data.iter_mut().zip(chunk) {
                *d += c;
            }
        }
    }
    Tensor::from_parts(target.to_vec(), data)
}

fn map_unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

/// Applies `f(lane, out_lane)` independently over every lane along `axis`.
fn lane_map(t: &Tensor, axis: usize, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
    let (outer, n, inner) = axis_split(t.shape(), axis);
    let mut out = vec![0.0; t.numel()];
    let mut lane = vec![0.0; n];
    let mut lane_out = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..n {
                lane[j] = t.data()[(o * n + j) * inner + i];
            }
            f(&lane, &mut lane_out);
            for j in 0..n {
                out[(o * n + j) * inner + i] = lane_out[j];
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

/// Lane-wise zip of two same-shape tensors (upstream grad and a saved value).
fn lane_zip(dy: &Tensor, other: &Tensor, axis: usize, f: impl Fn(&[f64], &[f64], &mut [f64])) -> Tensor {
    let (outer, n, inner) = axis_split(dy.shape(), axis);
    let mut out = vec![0.0; dy.numel()];
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut o_lane = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..n {
                let idx = (o * n + j) * inner + i;
                a[j] = dy.data()[idx];
                b[j] = other.data()[idx];
            }
            f(&a, &b, &mut o_lane);
            for j in 0..n {
                out[(o * n + j) * inner + i] = o_lane[j];
            }
        }
    }
    Tensor::from_parts(dy.shape().to_vec(), out)
}

fn softmax_lane(lane: &[f64], out: &mut [f64]) {
    let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(lane) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_lane(lane: &[f64], out: &mut [f64]) {
    let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = lane.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    for (o, &x) in out.iter_mut().zip(lane) {
        *o = x - lse;
    }
}

fn lane_stats(lane: &[f64], eps: f64) -> (f64, f64) {
    let n = lane.len() as f64;
    let mean = lane.iter().sum::<f64>() / n;
    let var = lane.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, (var + eps).sqrt())
}

fn layer_norm_lane(lane: &[f64], out: &mut [f64], eps: f64) {
    let (mean, std) = lane_stats(lane, eps);
    for (o, &x) in out.iter_mut().zip(lane) {
        *o = (x - mean) / std;
    }
}

fn layer_norm_bwd_lane(dy: &[f64], x: &[f64], out: &mut [f64], eps: f64) {
    let n = x.len() as f64;
    let (mean, std) = lane_stats(x, eps);
    let mut m_dy = 0.0;
    let mut m_dy_xhat = 0.0;
    for (&g, &xv) in dy.iter().zip(x) {
        let xhat = (xv - mean) / std;
        m_dy += g;
        m_dy_xhat += g * xhat;
    }
    m_dy /= n;
    m_dy_xhat /= n;
    for ((o, &g), &xv) in out.iter_mut().zip(dy).zip(x) {
        let xhat = (xv - mean) / std;
        *o = (g - m_dy - xhat * m_dy_xhat) / std;
    }
}

fn reduce(t: &Tensor, axis: Option<usize>, mean: bool) -> Result<Tensor> {
    match axis {
        None => {
            if t.numel() == 0 {
                return Err(TensorError::Contract("reduction over empty tensor".into()));
            }
            let mut s: f64 = t.data().iter().sum();
            if mean {
                s /= t.numel() as f64;
            }
            Ok(Tensor::from_parts(vec![], vec![s]))
        }
        Some(a) => {
            check_axis(if mean { "mean" } else { "sum" }, t, a)?;
            let (outer, n, inner) = axis_split(t.shape(), a);
            if n == 0 {
                return Err(TensorError::Contract("reduction over empty axis".into()));
            }
            let mut out_shape = t.shape().to_vec();
            out_shape.remove(a);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        out[o * inner + i] += t.data()[(o * n + j) * inner + i];
                    }
                }
            }
            if mean {
                for o in out.iter_mut() {
                    *o /= n as f64;
                }
            }
            Ok(Tensor::from_parts(out_shape, out))
        }
    }
}

fn reduce_bwd(dy: &Tensor, src_shape: &[usize], axis: Option<usize>, mean: bool) -> Tensor {
    match axis {
        None => {
            let numel: usize = src_shape.iter().product();
            let g = dy.data()[0] / if mean { numel as f64 } else { 1.0 };
            Tensor::from_parts(src_shape.to_vec(), vec![g; numel])
        }
        Some(a) => {
            let (outer, n, inner) = axis_split(src_shape, a);
            let scale = if mean { 1.0 / n as f64 } else { 1.0 };
            let mut out = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        out[(o * n + j) * inner + i] = dy.data()[o * inner + i] * scale;
                    }
                }
            }
            Tensor::from_parts(src_shape.to_vec(), out)
        }
    }
}

fn slice_kernel(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, n, inner) = axis_split(t.shape(), axis);
    let mut out_shape = t.shape().to_vec();
    out_shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        data.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    Tensor::from_parts(out_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[3.0, -1.0, 2.0, 5.0]));
        let out = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, -1.0, 2.0, 5.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_lane_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[3.3, 3.3, 3.3, 3.3]));
        let y = g.layer_norm(x, 1, 1e-5).unwrap();
        for &v in g.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn backward_of_x_squared_is_two_x() {
        // loss = x·x at x = 3 -> grad 6
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1], &[3.0]), true);
        let xt = g.transpose(x).unwrap();
        let y = g.matmul(x, xt).unwrap();
        let loss = g.sum(y, None).unwrap();
        g.backward(loss).unwrap();
        assert!((g.grad(x).unwrap().data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_gradient_at_uniform_logits() {
        // d/dlogits of -log softmax(logits)[k] = p - onehot(k), p uniform here.
        let n = 5;
        let k = 2;
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[1, n]), true);
        let lp = g.log_softmax(logits, 1).unwrap();
        let pos = g.slice(lp, 1, k, 1).unwrap();
        let s = g.sum(pos, None).unwrap();
        let loss = g.scale(s, -1.0).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        for (j, &v) in grad.data().iter().enumerate() {
            let expect = 1.0 / n as f64 - if j == k { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-12, "grad[{j}] = {v}, expected {expect}");
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }

    #[test]
    fn untouched_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let used = g.leaf(t(&[1, 1], &[2.0]), true);
        let unused = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let loss = g.sum(used, None).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn embedding_gradient_accumulates_repeated_ids() {
        let mut g = Graph::new();
        let table = g.leaf(Tensor::zeros(&[3, 2]), true);
        let rows = g.embedding(table, &[1, 1, 2]).unwrap();
        let loss = g.sum(rows, None).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(table).unwrap();
        assert_eq!(grad.data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut g = Graph::new();
        let table = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.embedding(table, &[0, 3]).unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[1e308]));
        let b = g.constant(t(&[1], &[1e308]));
        let err = g.add(a, b).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "add" }));
    }

    #[test]
    fn mask_add_broadcasts_over_rows() {
        let mut g = Graph::new();
        let scores = g.constant(t(&[2, 3], &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]));
        let mask = g.constant(t(&[3], &[0.0, -10.0, 0.0]));
        let y = g.mask_add(scores, mask).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -9.0, 1.0, 2.0, -8.0, 2.0]);
    }

    #[test]
    fn replaying_construction_is_bit_identical() {
        let build = |seed: u64| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let a = g.leaf(Tensor::randn(&[4, 4], 1.0, &mut rng), true);
            let b = g.leaf(Tensor::randn(&[4, 4], 1.0, &mut rng), true);
            let c = g.matmul(a, b).unwrap();
            let d = g.gelu(c).unwrap();
            let e = g.layer_norm(d, 1, 1e-5).unwrap();
            let s = g.softmax(e, 1).unwrap();
            let loss = g.mean(s, None).unwrap();
            g.backward(loss).unwrap();
            let mut out = g.value(loss).data().to_vec();
            out.extend_from_slice(g.grad(a).unwrap().data());
            out.extend_from_slice(g.grad(b).unwrap().data());
            out
        };
        let first = build(11);
        let second = build(11);
        assert_eq!(first, second, "identical seed and inputs must replay bit-for-bit");
    }

    #[test]
    fn backward_linearity_in_the_loss() {
        // grads of a·f + b·g match a·grad(f) + b·grad(g)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let (a, b) = (1.7, -0.4);

        let grads = |wa: f64, wb: f64, use_f: bool, use_g: bool| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone(), true);
            let mut parts = Vec::new();
            if use_f {
                let f_out = g.tanh(x).unwrap();
                let f_loss = g.sum(f_out, None).unwrap();
                parts.push(g.scale(f_loss, wa).unwrap());
            }
            if use_g {
                let g_out = g.sigmoid(x).unwrap();
                let g_loss = g.sum(g_out, None).unwrap();
                parts.push(g.scale(g_loss, wb).unwrap());
            }
            let mut total = parts[0];
            for p in &parts[1..] {
                total = g.add(total, *p).unwrap();
            }
            g.backward(total).unwrap();
            g.grad(x).unwrap().data().to_vec()
        };

        let combined = grads(a, b, true, true);
        let f_only = grads(1.0, 0.0, true, false);
        let g_only = grads(0.0, 1.0, false, true);
        for ((c, f), gg) in combined.iter().zip(&f_only).zip(&g_only) {
            assert!((c - (a * f + b * gg)).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // Random 4-primitive composite: matmul -> gelu -> layer-norm -> sum.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..5 {
            let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
            let err = gradcheck::check_builder(
                &[a, b],
                &|g, vars| {
                    let m = g.matmul(vars[0], vars[1]).unwrap();
                    let act = g.gelu(m).unwrap();
                    let ln = g.layer_norm(act, 1, 1e-5).unwrap();
                    g.sum(ln, None).unwrap()
                },
                1e-5,
            );
            assert!(err < 1e-4, "composite gradcheck failed: {err}");
        }
    }

    #[test]
    fn broadcast_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let bias = Tensor::randn(&[4], 1.0, &mut rng);
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = t(&[3, 4], &w);
        let err = gradcheck::check_builder(
            &[a, bias],
            &|g, vars| {
                let sum = g.add(vars[0], vars[1]).unwrap();
                let prod = g.mul(sum, vars[1]).unwrap();
                let wc = g.constant(w.clone());
                let weighted = g.mul(prod, wc).unwrap();
                g.sum(weighted, None).unwrap()
            },
            1e-5,
        );
        assert!(err < 1e-4, "broadcast gradcheck failed: {err}");
    }
}
