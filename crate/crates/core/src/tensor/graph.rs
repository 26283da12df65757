//! Define-by-run tape. Every op computes its forward value immediately and
//! records what the backward pass needs; node ids only ever point backwards.

use std::collections::HashMap;

use super::kernels::{gemm, Broadcast, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with stored running statistics (negative variances clamp to 0).
    Eval { mean: &'a Tensor, var: &'a Tensor },
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId, Broadcast),
    Sub(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId, Broadcast),
    MatMul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    Upsample {
        x: NodeId,
        scale: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Scale(NodeId, f64),
    Clamp(NodeId, f64, f64),
    Dropout(NodeId, Vec<f64>),
    Embedding(NodeId, Vec<usize>),
    Gather(NodeId, Vec<usize>),
    Concat(Vec<NodeId>),
    SliceRows(NodeId, usize),
    Reshape(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every grad-requiring leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    /// Gradient for `leaf`; panics if the leaf did not require gradients.
    pub fn of(&self, leaf: NodeId) -> &Tensor {
        self.grads
            .get(&leaf)
            .unwrap_or_else(|| panic!("no gradient recorded for {leaf:?}"))
    }

    pub fn take(&mut self, leaf: NodeId) -> Option<Tensor> {
        self.grads.remove(&leaf)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Forward value of `id` (copied out of the tape).
    pub fn evaluate(&self, id: NodeId) -> Result<Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| n.value.clone())
            .ok_or_else(|| Error::Contract(format!("node {} does not exist", id.0)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId, Broadcast) -> Op,
    ) -> Result<NodeId> {
        let plan = Broadcast::new(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        plan.for_each(|o, ia, ib| out[o] = f(va[ia], vb[ib]));
        let value = Tensor::from_parts(plan.out_shape.clone(), out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, make(a, b, plan), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let k = self.constant(Tensor::scalar(c));
        self.add(x, k)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `x @ w + b` with `w` stored as `[in, out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// NCHW convolution with OIHW weights and optional per-channel bias.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_ch] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} for {} filters", self.shape(b), geom.out_ch),
                ));
            }
        }
        let out = geom.forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor::from_parts(geom.out_shape(), out),
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
    pub fn upsample_nearest(&mut self, x: NodeId, scale: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || scale == 0 {
            return Err(Error::shape("upsample", format!("input {s:?}, scale {scale}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * scale, w * scale);
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for i in 0..oh {
                for j in 0..ow {
                    out[(p * oh + i) * ow + j] = src[(p * h + i / scale) * w + j / scale];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![s[0], s[1], oh, ow], out),
            Op::Upsample { x, scale },
            rg,
        ))
    }

    /// Per-channel batch norm over `[N, C]` or `[N, C, H, W]` inputs.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BatchNormMode<'_>,
        eps: f64,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 && s.len() != 4 {
            return Err(Error::shape("batch_norm", format!("input {s:?}")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", format!("affine params for {c} channels")));
        }
        let spatial: usize = s[2..].iter().product();
        let count = s[0] * spatial;
        let xv = self.value(x).data();
        let chan = |i: usize| (i / spatial) % c;

        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                for (i, v) in xv.iter().enumerate() {
                    mean[chan(i)] += v;
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0.0; c];
                for (i, v) in xv.iter().enumerate() {
                    let d = v - mean[chan(i)];
                    var[chan(i)] += d * d;
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var, true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.shape() != [c] || var.shape() != [c] {
                    return Err(Error::shape("batch_norm", "running statistics shape"));
                }
                let var = var.data().iter().map(|v| v.max(0.0)).collect();
                (mean.data().to_vec(), var, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, v) in xv.iter().enumerate() {
            let ch = chan(i);
            xhat[i] = (v - mean[ch]) * inv_std[ch];
            out[i] = g[ch] * xhat[i] + b[ch];
        }
        let stats = train.then_some(BatchStats { mean, var, count });
        let rg = self.rg(&[x, gamma, beta]);
        let id = self.push(
            Tensor::from_parts(s, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((id, stats))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Natural log; refuses non-positive inputs rather than producing -inf/NaN.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Numeric(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    /// Row-wise softmax of a `[N, C]` tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("softmax", format!("expected rank 2, got {s:?}")));
        }
        let cols = s[1];
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(s, out), Op::Softmax(x), rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let v = t.sum() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    /// Inverted dropout. `rng = None` means evaluation mode, where this is the identity.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: Option<&mut RngStream>) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(x) };
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let out = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Dropout(x, mask), rg))
    }

    /// Rows of a `[V, D]` table selected by `indices`.
    pub fn embedding(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("embedding", format!("table {s:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Contract(format!(
                "embedding index {bad} out of range for {} rows",
                s[0]
            )));
        }
        if indices.is_empty() {
            return Err(Error::shape("embedding", "no indices"));
        }
        let d = s[1];
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), d], out),
            Op::Embedding(table, indices.to_vec()),
            rg,
        ))
    }

    /// `out[i] = x[i, indices[i]]` for a `[N, C]` input.
    pub fn gather(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != indices.len() {
            return Err(Error::shape(
                "gather",
                format!("input {s:?} with {} indices", indices.len()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[1]) {
            return Err(Error::Contract(format!("gather index {bad} >= {}", s[1])));
        }
        let v = self.value(x).data();
        let out = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| v[r * s[1] + c])
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![s[0]], out),
            Op::Gather(x, indices.to_vec()),
            rg,
        ))
    }

    /// Concatenate rank-2 tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let rows = self.shape(first).first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat", format!("part shape {s:?}, rows {rows}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start >= end || end > s[0] {
            return Err(Error::shape("slice_rows", format!("rows {start}..{end} of {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..end * inner].to_vec();
        let mut shape = s;
        shape[0] = end - start;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceRows(x, start), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reverse pass from a single-element node.
    pub fn gradients(&self, loss: NodeId) -> Result<Gradients> {
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract(format!("node {} does not exist", loss.0)))?;
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "gradients need a scalar output, node has shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let shape = node.value.shape().to_vec();
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .map(|g| Tensor::from_parts(shape.clone(), g))
                    .unwrap_or_else(|| Tensor::zeros(&shape));
                out.grads.insert(NodeId(idx), g);
            }
        }
        Ok(out)
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()]);
            f(slot);
        };
        let y = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, plan) | Op::Sub(a, b, plan) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |ga| plan.for_each(|o, ia, _| ga[ia] += g[o]));
                acc(*b, &mut |gb| plan.for_each(|o, _, ib| gb[ib] += sign * g[o]));
            }
            Op::Mul(a, b, plan) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| plan.for_each(|o, ia, ib| ga[ia] += g[o] * vb[ib]));
                acc(*b, &mut |gb| plan.for_each(|o, ia, ib| gb[ib] += g[o] * va[ia]));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &mut |ga| gemm(m, n, k, g, (n, 1), val(*b), (1, n), 1.0, ga));
                acc(*b, &mut |gb| gemm(k, m, n, val(*a), (1, k), g, (n, 1), 1.0, gb));
            }
            Op::Conv2d { x, w, b, geom } => {
                let want = (wants(*x), wants(*w), b.is_some_and(wants));
                let (dx, dw, db) = geom.backward(val(*x), val(*w), g, want);
                if let Some(dx) = dx {
                    acc(*x, &mut |gx| gx.iter_mut().zip(&dx).for_each(|(a, d)| *a += d));
                }
                if let Some(dw) = dw {
                    acc(*w, &mut |gw| gw.iter_mut().zip(&dw).for_each(|(a, d)| *a += d));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    acc(*b, &mut |gb| gb.iter_mut().zip(&db).for_each(|(a, d)| *a += d));
                }
            }
            Op::Upsample { x, scale } => {
                let s = self.nodes[x.0].value.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h * scale, w * scale);
                acc(*x, &mut |gx| {
                    for p in 0..planes {
                        for i in 0..oh {
                            for j in 0..ow {
                                gx[(p * h + i / scale) * w + j / scale] += g[(p * oh + i) * ow + j];
                            }
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.nodes[x.0].value.shape();
                let c = s[1];
                let spatial: usize = s[2..].iter().product();
                let count = (s[0] * spatial) as f64;
                let chan = |i: usize| (i / spatial) % c;
                let gv = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, gi) in g.iter().enumerate() {
                    sum_g[chan(i)] += gi;
                    sum_gx[chan(i)] += gi * xhat[i];
                }
                acc(*gamma, &mut |gg| gg.iter_mut().zip(&sum_gx).for_each(|(a, d)| *a += d));
                acc(*beta, &mut |gb| gb.iter_mut().zip(&sum_g).for_each(|(a, d)| *a += d));
                acc(*x, &mut |gx| {
                    for (i, gi) in g.iter().enumerate() {
                        let ch = chan(i);
                        let scale = gv[ch] * inv_std[ch];
                        gx[i] += if *train {
                            scale * (gi - sum_g[ch] / count - xhat[i] * sum_gx[ch] / count)
                        } else {
                            scale * gi
                        };
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += if xv[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                });
            }
            Op::Tanh(x) => acc(*x, &mut |gx| {
                (0..g.len()).for_each(|i| gx[i] += g[i] * (1.0 - y[i] * y[i]))
            }),
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                (0..g.len()).for_each(|i| gx[i] += g[i] * y[i] * (1.0 - y[i]))
            }),
            Op::Exp(x) => acc(*x, &mut |gx| (0..g.len()).for_each(|i| gx[i] += g[i] * y[i])),
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| (0..g.len()).for_each(|i| gx[i] += g[i] / xv[i]));
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| (0..g.len()).for_each(|i| gx[i] += c * g[i])),
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = node.value.shape()[1];
                acc(*x, &mut |gx| {
                    for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::Dropout(x, mask) => {
                acc(*x, &mut |gx| (0..g.len()).for_each(|i| gx[i] += g[i] * mask[i]))
            }
            Op::Embedding(table, idx) => {
                let d = node.value.shape()[1];
                acc(*table, &mut |gt| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Gather(x, idx) => {
                let cols = self.nodes[x.0].value.shape()[1];
                acc(*x, &mut |gx| {
                    for (r, &c) in idx.iter().enumerate() {
                        gx[r * cols + c] += g[r];
                    }
                });
            }
            Op::Concat(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows(x, start) => {
                let offset = start * g.len() / node.value.shape()[0];
                acc(*x, &mut |gx| {
                    gx[offset..offset + g.len()].iter_mut().zip(g).for_each(|(a, d)| *a += d)
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, d)| *a += d)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_graph_returns_leaf() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(g.evaluate(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn matmul_by_identity() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = g.constant(Tensor::matrix(2, 2, vec![3.0, -1.0, 0.5, 7.0]).unwrap());
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let y = g.tanh(x);
        assert_eq!(g.value(y), &Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.gradients(y).unwrap();
        assert_eq!(grads.of(x).item().unwrap(), 6.0);
    }

    #[test]
    fn linear_map_gradient_is_rank_one() {
        // L = sum(W·x) with one-hot x: dL/dW[i][j] = x[j]
        let mut g = Graph::new();
        let w = g.param(Tensor::matrix(3, 4, (0..12).map(f64::from).collect()).unwrap());
        let x = g.constant(Tensor::matrix(4, 1, vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let y = g.matmul(w, x).unwrap();
        let l = g.sum(y);
        let grads = g.gradients(l).unwrap();
        let gw = grads.of(w);
        for i in 0..3 {
            assert_eq!(gw.row(i), &[0.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.gradients(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::vector(vec![1.0, 1.0]));
        let l = g.scale(x, 3.0);
        let grads = g.gradients(l).unwrap();
        assert_eq!(grads.of(unused), &Tensor::zeros(&[2]));
    }

    #[test]
    fn shape_mismatch_is_structured() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.dropout(x, 0.25, None).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 1, vec![3.0, 5.0]).unwrap());
        let gamma = g.constant(Tensor::vector(vec![1.0]));
        let beta = g.constant(Tensor::vector(vec![0.0]));
        let mean = Tensor::vector(vec![1.0]);
        let var = Tensor::vector(vec![4.0]);
        let (y, stats) = g
            .batch_norm(x, gamma, beta, BatchNormMode::Eval { mean: &mean, var: &var }, 0.0)
            .unwrap();
        assert!(stats.is_none());
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn log_refuses_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Numeric(_))));
    }
}
