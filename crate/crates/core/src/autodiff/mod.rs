//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive application in topological order;
//! [`Tape::backward`] walks the record in reverse and accumulates gradients
//! into every node that requires them. Primitives never mutate their inputs.

mod adam;
mod checkpoint;
mod gradcheck;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::grad_check;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;
use crate::wavelet::{dwt2_channels, idwt2_channels};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Subtract(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    ScalarMultiply(NodeId, f64),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Softmax { input: NodeId, axis: usize },
    LogSoftmax { input: NodeId, axis: usize },
    Sum(NodeId),
    Mean(NodeId),
    MaxOver { input: NodeId, argmax: Vec<usize> },
    Reshape(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { input: NodeId, axis: usize, start: usize, len: usize },
    L1Norm(NodeId),
    SquaredL2Distance(NodeId, NodeId),
    NegativeLogLikelihood { log_probs: NodeId, labels: Vec<usize> },
    ClipValues { input: NodeId, lo: f64, hi: f64 },
    Dwt2(NodeId),
    Idwt2(NodeId),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Computation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// Lane decomposition of a shape around `axis`: (outer, lane, inner).
fn lanes(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(invalid(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, lane, inner))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the backward root with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Result<Tensor> {
        if !self.backward_done {
            return Err(Error::State(
                "gradients requested before backward was run".into(),
            ));
        }
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return Err(invalid("gradient requested for a node that does not require it"));
        }
        match &self.grads[id.0] {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()),
            None => Ok(Tensor::zeros(node.value.shape().to_vec())),
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        id
    }

    fn push_from(&mut self, value: Tensor, inputs: &[NodeId], op: Op) -> NodeId {
        let requires = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(value, requires, op)
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(invalid(format!("{what}: shape mismatch {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_from(value, &[a, b], Op::Add(a, b)))
    }

    pub fn subtract(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "subtract")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_from(value, &[a, b], Op::Subtract(a, b)))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "hadamard")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_from(value, &[a, b], Op::Hadamard(a, b)))
    }

    pub fn scalar_multiply(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_from(value, &[a], Op::ScalarMultiply(a, factor)))
    }

    /// 2D matrix product: `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(invalid(format!("matmul: incompatible shapes {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x != 0.0 {
                    let row = &bv[p * n..(p + 1) * n];
                    let dst = &mut out[i * n..(i + 1) * n];
                    for (d, y) in dst.iter_mut().zip(row) {
                        *d += x * y;
                    }
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_from(value, &[a, b], Op::MatMul(a, b)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_from(value, &[a], Op::Relu(a)))
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        let (outer, lane, inner) = lanes(&shape, axis)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * lane + l) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..lane {
                    mx = mx.max(src[at(l)]);
                }
                let mut sum = 0.0;
                for l in 0..lane {
                    let e = (src[at(l)] - mx).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..lane {
                    out[at(l)] /= sum;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push_from(value, &[a], Op::Softmax { input: a, axis }))
    }

    pub fn log_softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        let (outer, lane, inner) = lanes(&shape, axis)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * lane + l) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..lane {
                    mx = mx.max(src[at(l)]);
                }
                let mut sum = 0.0;
                for l in 0..lane {
                    sum += (src[at(l)] - mx).exp();
                }
                let log_z = mx + sum.ln();
                for l in 0..lane {
                    out[at(l)] = src[at(l)] - log_z;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push_from(value, &[a], Op::LogSoftmax { input: a, axis }))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(a).data().iter().sum();
        Ok(self.push_from(Tensor::scalar(total), &[a], Op::Sum(a)))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(invalid("mean of an empty tensor"));
        }
        let total: f64 = self.value(a).data().iter().sum();
        Ok(self.push_from(Tensor::scalar(total / n as f64), &[a], Op::Mean(a)))
    }

    /// Maximum along `axis`; ties resolve to the first occurrence.
    pub fn max_over(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        let (outer, lane, inner) = lanes(&shape, axis)?;
        if lane == 0 {
            return Err(invalid("max_over along an empty axis"));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0;
                for l in 0..lane {
                    let idx = (o * lane + l) * inner + i;
                    if src[idx] > best {
                        best = src[idx];
                        best_at = idx;
                    }
                }
                out[o * inner + i] = best;
                argmax[o * inner + i] = best_at;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_from(value, &[a], Op::MaxOver { input: a, argmax }))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push_from(value, &[a], Op::Reshape(a)))
    }

    /// Concatenation along an existing axis.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(invalid("concat of zero tensors"));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(invalid(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != first.len() {
                return Err(invalid("concat: rank mismatch"));
            }
            for (d, (x, y)) in s.iter().zip(&first).enumerate() {
                if d != axis && x != y {
                    return Err(invalid(format!(
                        "concat: shape mismatch {s:?} vs {first:?} outside axis {axis}"
                    )));
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = lanes(&out_shape, axis)?;
        let mut out = vec![0.0; out_shape.iter().product()];
        let mut offset = 0;
        for &id in inputs {
            let lane = self.value(id).shape()[axis];
            let src = self.value(id).data();
            for o in 0..outer {
                for l in 0..lane {
                    let dst_base = (o * axis_total + offset + l) * inner;
                    let src_base = (o * lane + l) * inner;
                    out[dst_base..dst_base + inner]
                        .copy_from_slice(&src[src_base..src_base + inner]);
                }
            }
            offset += lane;
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_from(
            value,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        let (outer, lane, inner) = lanes(&shape, axis)?;
        if start + len > lane {
            return Err(invalid(format!(
                "slice [{start}, {}) out of range for axis length {lane}",
                start + len
            )));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for l in 0..len {
                let src_base = (o * lane + start + l) * inner;
                let dst_base = (o * len + l) * inner;
                out[dst_base..dst_base + inner].copy_from_slice(&src[src_base..src_base + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_from(
            value,
            &[a],
            Op::Slice {
                input: a,
                axis,
                start,
                len,
            },
        ))
    }

    pub fn l1_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(a).data().iter().map(|x| x.abs()).sum();
        Ok(self.push_from(Tensor::scalar(total), &[a], Op::L1Norm(a)))
    }

    pub fn squared_l2_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "squared_l2_distance")?;
        let total: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push_from(
            Tensor::scalar(total),
            &[a, b],
            Op::SquaredL2Distance(a, b),
        ))
    }

    /// Mean negative log-likelihood of `[m, n]` log-probabilities at `labels`.
    pub fn negative_log_likelihood(&mut self, log_probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let shape = self.value(log_probs).shape();
        if shape.len() != 2 {
            return Err(invalid(format!(
                "negative_log_likelihood expects [m, n] log-probs, got {shape:?}"
            )));
        }
        let (m, n) = (shape[0], shape[1]);
        if labels.len() != m {
            return Err(invalid(format!(
                "negative_log_likelihood: {m} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= n) {
            return Err(invalid(format!(
                "negative_log_likelihood: label {bad} outside {n} classes"
            )));
        }
        let src = self.value(log_probs).data();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -src[i * n + l])
            .sum();
        Ok(self.push_from(
            Tensor::scalar(total / m as f64),
            &[log_probs],
            Op::NegativeLogLikelihood {
                log_probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside the bounds.
    pub fn clip_values(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(invalid(format!("clip_values: lo {lo} > hi {hi}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|x| x.clamp(lo, hi))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_from(value, &[a], Op::ClipValues { input: a, lo, hi }))
    }

    /// Channel-wise Haar analysis: `[C, N, N] -> [4, C, N/2, N/2]`.
    pub fn dwt2(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(invalid(format!("dwt2 expects [C, N, N], got {shape:?}")));
        }
        let (c, n) = (shape[0], shape[1]);
        if n < 2 || n % 2 != 0 {
            return Err(invalid(format!("dwt2 requires even side length >= 2, got {n}")));
        }
        let half = n / 2;
        let mut out = vec![0.0; 4 * c * half * half];
        dwt2_channels(self.value(a).data(), c, n, &mut out);
        let value = Tensor::new(vec![4, c, half, half], out)?;
        Ok(self.push_from(value, &[a], Op::Dwt2(a)))
    }

    /// Channel-wise Haar synthesis: `[4, C, M, M] -> [C, 2M, 2M]`.
    pub fn idwt2(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 4 || shape[0] != 4 || shape[2] != shape[3] {
            return Err(invalid(format!("idwt2 expects [4, C, M, M], got {shape:?}")));
        }
        let (c, half) = (shape[1], shape[2]);
        let n = 2 * half;
        let mut out = vec![0.0; c * n * n];
        idwt2_channels(self.value(a).data(), c, half, &mut out);
        let value = Tensor::new(vec![c, n, n], out)?;
        Ok(self.push_from(value, &[a], Op::Idwt2(a)))
    }

    /// Backpropagates from a scalar root through the whole record.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already run on this tape".into()));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::State("backward root is not on this tape".into()));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].clone() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, update: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
        update(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Subtract(a, b) => {
                self.accumulate(grads, *a, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Hadamard(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::ScalarMultiply(a, factor) => {
                let f = *factor;
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * f;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                self.accumulate(grads, *a, |d| {
                    // dA[i, p] += sum_j g[i, j] * B[p, j]
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bv[p * n..(p + 1) * n];
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            d[i * k + p] += acc;
                        }
                    }
                });
                self.accumulate(grads, *b, |d| {
                    // dB[p, j] += sum_i A[i, p] * g[i, j]
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x != 0.0 {
                                let grow = &g[i * n..(i + 1) * n];
                                let drow = &mut d[p * n..(p + 1) * n];
                                for j in 0..n {
                                    drow[j] += x * grow[j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.nodes[a.0].value.data();
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        if av[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let out = self.nodes[idx].value.data();
                let shape = self.nodes[idx].value.shape();
                let (outer, lane, inner) = lanes(shape, *axis).expect("validated at forward");
                self.accumulate(grads, *input, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * lane + l) * inner + i;
                            let mut dot = 0.0;
                            for l in 0..lane {
                                dot += g[at(l)] * out[at(l)];
                            }
                            for l in 0..lane {
                                d[at(l)] += out[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { input, axis } => {
                let out = self.nodes[idx].value.data();
                let shape = self.nodes[idx].value.shape();
                let (outer, lane, inner) = lanes(shape, *axis).expect("validated at forward");
                self.accumulate(grads, *input, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * lane + l) * inner + i;
                            let mut gsum = 0.0;
                            for l in 0..lane {
                                gsum += g[at(l)];
                            }
                            for l in 0..lane {
                                d[at(l)] += g[at(l)] - out[at(l)].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                self.accumulate(grads, *a, |d| {
                    for x in d.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let gv = g[0] / n;
                self.accumulate(grads, *a, |d| {
                    for x in d.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::MaxOver { input, argmax } => {
                self.accumulate(grads, *input, |d| {
                    for (out_idx, &src_idx) in argmax.iter().enumerate() {
                        d[src_idx] += g[out_idx];
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[idx].value.shape();
                let (outer, total, inner) = lanes(out_shape, *axis).expect("validated at forward");
                let mut offset = 0;
                for &inp in inputs {
                    let lane = self.nodes[inp.0].value.shape()[*axis];
                    self.accumulate(grads, inp, |d| {
                        for o in 0..outer {
                            for l in 0..lane {
                                let src_base = (o * total + offset + l) * inner;
                                let dst_base = (o * lane + l) * inner;
                                for i in 0..inner {
                                    d[dst_base + i] += g[src_base + i];
                                }
                            }
                        }
                    });
                    offset += lane;
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let in_shape = self.nodes[input.0].value.shape();
                let (outer, lane, inner) = lanes(in_shape, *axis).expect("validated at forward");
                self.accumulate(grads, *input, |d| {
                    for o in 0..outer {
                        for l in 0..*len {
                            let dst_base = (o * lane + start + l) * inner;
                            let src_base = (o * len + l) * inner;
                            for i in 0..inner {
                                d[dst_base + i] += g[src_base + i];
                            }
                        }
                    }
                });
            }
            Op::L1Norm(a) => {
                let av = self.nodes[a.0].value.data();
                let gv = g[0];
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        // Subgradient 0 at exactly zero.
                        d[i] += gv * if av[i] > 0.0 {
                            1.0
                        } else if av[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                });
            }
            Op::SquaredL2Distance(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let gv = g[0];
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gv * 2.0 * (av[i] - bv[i]);
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] -= gv * 2.0 * (av[i] - bv[i]);
                    }
                });
            }
            Op::NegativeLogLikelihood { log_probs, labels } => {
                let n = self.nodes[log_probs.0].value.shape()[1];
                let m = labels.len() as f64;
                let gv = g[0];
                self.accumulate(grads, *log_probs, |d| {
                    for (i, &l) in labels.iter().enumerate() {
                        d[i * n + l] -= gv / m;
                    }
                });
            }
            Op::ClipValues { input, lo, hi } => {
                let av = self.nodes[input.0].value.data();
                let (lo, hi) = (*lo, *hi);
                self.accumulate(grads, *input, |d| {
                    for i in 0..d.len() {
                        if av[i] > lo && av[i] < hi {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Dwt2(a) => {
                // The transform is orthonormal, so the adjoint is the inverse.
                let shape = self.nodes[idx].value.shape();
                let (c, half) = (shape[1], shape[2]);
                let n = 2 * half;
                let mut back = vec![0.0; c * n * n];
                idwt2_channels(g, c, half, &mut back);
                self.accumulate(grads, *a, |d| {
                    for (x, y) in d.iter_mut().zip(&back) {
                        *x += y;
                    }
                });
            }
            Op::Idwt2(a) => {
                let shape = self.nodes[idx].value.shape();
                let (c, n) = (shape[0], shape[1]);
                let mut back = vec![0.0; 4 * c * (n / 2) * (n / 2)];
                dwt2_channels(g, c, n, &mut back);
                self.accumulate(grads, *a, |d| {
                    for (x, y) in d.iter_mut().zip(&back) {
                        *x += y;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn leaf_vec(tape: &mut Tape, data: Vec<f64>) -> NodeId {
        let n = data.len();
        tape.leaf(Tensor::new(vec![n], data).unwrap(), true)
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, vec![1.0, 2.0, 3.0]);
        let sq = tape.hadamard(x, x).unwrap();
        let out = tape.sum(sq).unwrap();
        tape.backward(out).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, vec![0.0; 4]);
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn squared_l2_distance_gradient() {
        let mut tape = Tape::new();
        let a = leaf_vec(&mut tape, vec![1.0, 0.0]);
        let b = tape.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), false);
        let d = tape.squared_l2_distance(a, b).unwrap();
        assert_eq!(tape.value(d).item().unwrap(), 1.0);
        tape.backward(d).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 0.0]);
    }

    #[test]
    fn fanout_accumulates_both_branches() {
        // f(x) = sum(x*x) + sum(x) has gradient 2x + 1.
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, vec![0.5, -1.5, 2.0]);
        let sq = tape.hadamard(x, x).unwrap();
        let g = tape.sum(sq).unwrap();
        let h = tape.sum(x).unwrap();
        let out = tape.add(g, h).unwrap();
        tape.backward(out).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -2.0, 5.0]);
    }

    #[test]
    fn deep_chain_stays_accurate() {
        // 20 alternating affine/relu layers on a positive input.
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, vec![0.7, 1.3]);
        let mut cur = x;
        for k in 0..20 {
            cur = tape.scalar_multiply(cur, 1.0 + 0.01 * k as f64).unwrap();
            cur = tape.relu(cur).unwrap();
        }
        let out = tape.sum(cur).unwrap();
        tape.backward(out).unwrap();
        let expect: f64 = (0..20).map(|k| 1.0 + 0.01 * k as f64).product();
        for g in tape.grad(x).unwrap().data() {
            assert!((g - expect).abs() / expect < 1e-12);
        }
    }

    #[test]
    fn max_over_routes_to_first_on_ties() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![2, 3], vec![5.0, 5.0, 1.0, 0.0, 7.0, 7.0]).unwrap(),
            true,
        );
        let m = tape.max_over(x, 1).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0, 7.0]);
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(
            tape.grad(x).unwrap().data(),
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn clip_gradient_zero_at_bounds_and_outside() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, vec![-0.5, 0.0, 0.5, 1.0, 1.5]);
        let c = tape.clip_values(x, 0.0, 1.0).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0, 0.0, 0.5, 1.0, 1.0]);
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_slice_roundtrip_and_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), true);
        let b = tape.leaf(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap(), true);
        let cat = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(cat).shape(), &[3, 2]);
        let sl = tape.slice(cat, 0, 1, 2).unwrap();
        assert_eq!(tape.value(sl).data(), &[3.0, 4.0, 5.0, 6.0]);
        let s = tape.sum(sl).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn nll_of_uniform_logits_is_ln_n() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![2, 5], vec![0.0; 10]).unwrap(), true);
        let lp = tape.log_softmax(logits, 1).unwrap();
        let loss = tape.negative_log_likelihood(lp, &[0, 3]).unwrap();
        let expect = (5.0f64).ln();
        assert!((tape.value(loss).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_out_of_range_labels() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap(), false);
        let lp = tape.log_softmax(logits, 1).unwrap();
        assert!(tape.negative_log_likelihood(lp, &[3]).is_err());
    }

    #[test]
    fn primitives_do_not_mutate_inputs() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, vec![1.0, -2.0, 3.0]);
        let before = tape.value(x).clone();
        let r = tape.relu(x).unwrap();
        let _ = tape.hadamard(x, r).unwrap();
        let _ = tape.clip_values(x, -1.0, 1.0).unwrap();
        assert_eq!(tape.value(x), &before);
    }

    #[test]
    fn grad_before_backward_is_state_error() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, vec![1.0]);
        match tape.grad(x) {
            Err(Error::State(_)) => {}
            other => panic!("expected state error, got {other:?}"),
        }
    }

    #[test]
    fn backward_twice_is_state_error() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, vec![1.0]);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = leaf_vec(&mut tape, vec![1.0, 2.0]);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = leaf_vec(&mut tape, vec![1.0, 2.0]);
        let b = leaf_vec(&mut tape, vec![1.0, 2.0, 3.0]);
        assert!(tape.add(a, b).is_err());
        assert!(tape.hadamard(a, b).is_err());
        assert!(tape.squared_l2_distance(a, b).is_err());
    }

    #[test]
    fn tape_dwt2_matches_plain_and_inverts() {
        let mut rng = crate::rng::stream(&[5]);
        let img: Vec<f64> = (0..2 * 16 * 16).map(|_| rng.gen::<f64>()).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 16, 16], img.clone()).unwrap(), true);
        let co = tape.dwt2(x).unwrap();
        assert_eq!(tape.value(co).shape(), &[4, 2, 8, 8]);
        // Channel 0 must agree with the single-image API.
        let sb = crate::wavelet::dwt2(&img[..256], 16).unwrap();
        let v = tape.value(co).data();
        for i in 0..64 {
            assert!((v[i] - sb.ll[i]).abs() < 1e-12);
        }
        let back = tape.idwt2(co).unwrap();
        let bv = tape.value(back).data();
        for (a, b) in bv.iter().zip(&img) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
