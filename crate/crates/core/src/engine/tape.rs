//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value and whatever the backward rule needs. [`Tape::backward`]
//! walks the nodes in reverse creation order, which is a valid topological
//! order because a node can only reference nodes created before it.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxMode {
    /// Each row (last axis) is normalized independently.
    #[default]
    Row,
    /// All entries share one normalizer.
    Global,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let n = stats.count as f64;
        let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c] * unbias;
        }
    }
}

/// Per-channel mean and biased variance observed in a training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Relu(Var),
    MaxReduce {
        x: Var,
        argmax: Vec<usize>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        s: Var,
    },
    ScaleConst(Var, f64),
    Softmax {
        x: Var,
        mode: SoftmaxMode,
    },
    CrossEntropy {
        scores: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Sum(Var),
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    WeightedRows {
        x: Var,
        weights: Vec<Vec<(usize, f64)>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that requires one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }

    /// Adds the gradient of every parameter bound on the tape into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, node) in &self.params {
            let Some(g) = &self.grads[node] else { continue };
            let t = &mut store.get_mut(id).tensor;
            let n = t.numel();
            let acc = t.grad.get_or_insert_with(|| vec![0.0; n]);
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

/// `a[m×k] · b[k×n]`, row-major.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut value = value;
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of every piecewise choice on the tape: ReLU activity masks and
    /// max-reduce winners. Two evaluations with equal signatures lie on the
    /// same smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxReduce { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter's current value as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let mut value = store.get(id).tensor.clone();
        value.grad = None;
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[0, 0]));
        }
        let (m, n) = (s[0], s[1]);
        let out = transpose_raw(self.value(a).data(), m, n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Shared per-position affine map over the last axis: `out[.., :] = x[.., :]·w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Error::dim("affine", sx, sw));
        }
        let (cin, cout) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dim("affine bias", &[cout], self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / cin;
        let mut out = matmul_raw(self.value(x).data(), self.value(w).data(), rows, cin, cout);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(cout) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = cout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Affine { x, w, b }, rg))
    }

    /// Batch normalization over every axis but the last.
    ///
    /// In training mode the batch statistics are returned so the caller can fold
    /// them into `state`; in inference mode the running statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
        training: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let c = self.value(x).channels();
        if c != state.channels() || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("batch_norm", self.shape(x), &[state.channels()]));
        }
        let data = self.value(x).data();
        let rows = data.len() / c;
        if rows == 0 {
            return Err(Error::Empty("batch_norm batch"));
        }
        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            for row in data.chunks(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; c];
            for row in data.chunks(c) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for (r, row) in data.chunks(c).enumerate() {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat[r * c + ch] = h;
                out[r * c + ch] = g[ch] * h + b[ch];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let stats = training.then_some(BatchStats { mean, var, count: rows });
        let var_out = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            rg,
        );
        Ok((var_out, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Maximum along `axis`; the gradient flows to the first maximal index.
    pub fn max_reduce(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "max_reduce axis {axis} invalid for rank {}",
                shape.len()
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for s in 1..len {
                    let idx = base + s * inner;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out[o * inner + i] = data[best];
                argmax[o * inner + i] = best;
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MaxReduce { x, argmax }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let mut value = self.value(a).clone();
        for (o, v) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let mut value = self.value(a).clone();
        for (o, v) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Multiplies every entry by a one-element tensor (typically a learnable scalar).
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("scale", self.shape(x), self.shape(s)));
        }
        let factor = self.value(s).data()[0];
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= factor);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::Scale { x, s }, rg))
    }

    pub fn scale_const(&mut self, x: Var, factor: f64) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= factor);
        let rg = self.rg(x);
        self.push(value, Op::ScaleConst(x, factor), rg)
    }

    /// Max-stabilized softmax; rows are taken along the last axis.
    pub fn softmax(&mut self, x: Var, mode: SoftmaxMode) -> Var {
        let mut value = self.value(x).clone();
        match mode {
            SoftmaxMode::Row => {
                let c = value.channels();
                value.data_mut().chunks_mut(c).for_each(softmax_in_place);
            }
            SoftmaxMode::Global => softmax_in_place(value.data_mut()),
        }
        let rg = self.rg(x);
        self.push(value, Op::Softmax { x, mode }, rg)
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `scores[N×C]`.
    pub fn cross_entropy(&mut self, scores: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(scores);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim("cross_entropy", s, &[labels.len()]));
        }
        let c = s[1];
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                classes: c,
            });
        }
        let mut probs = self.value(scores).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[label];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        loss /= labels.len() as f64;
        let rg = self.rg(scores);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                scores,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale_const(s, 1.0 / n)
    }

    /// Concatenation along the last axis; all leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat operands"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::dim("concat", self.shape(first), s));
            }
        }
        let mut shape = self.shape(first).to_vec();
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).channels()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        *shape.last_mut().unwrap() = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            rg,
        ))
    }

    /// Selects rows of `x[N×T]`; the result has shape `lead ++ [T]` where
    /// `product(lead) == rows.len()`.
    pub fn gather(&mut self, x: Var, rows: &[usize], lead: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || lead.iter().product::<usize>() != rows.len() {
            return Err(Error::dim("gather", s, lead));
        }
        let (n, t) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::InvalidArgument(format!(
                "gather row {bad} out of range for {n} rows"
            )));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * t);
        for &r in rows {
            out.extend_from_slice(&data[r * t..(r + 1) * t]);
        }
        let mut shape = lead.to_vec();
        shape.push(t);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { x, rows: rows.to_vec() }, rg))
    }

    /// `out[q, :] = Σ w · x[i, :]` over the `(i, w)` pairs listed for query `q`.
    pub fn weighted_rows(&mut self, x: Var, weights: Vec<Vec<(usize, f64)>>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("weighted_rows", s, &[0, 0]));
        }
        let (n, t) = (s[0], s[1]);
        let data = self.value(x).data();
        let mut out = vec![0.0; weights.len() * t];
        for (q, list) in weights.iter().enumerate() {
            let row = &mut out[q * t..(q + 1) * t];
            for &(i, w) in list {
                if i >= n {
                    return Err(Error::InvalidArgument(format!(
                        "weighted_rows source {i} out of range for {n} rows"
                    )));
                }
                for (o, v) in row.iter_mut().zip(&data[i * t..(i + 1) * t]) {
                    *o += w * v;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![weights.len(), t], out)?,
            Op::WeightedRows { x, weights },
            rg,
        ))
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut params = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(id) = node.op {
                params.push((id, idx));
                continue;
            }
            if !node.requires_grad {
                continue;
            }
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &dout, &mut grads);
            grads[idx] = Some(dout);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn backprop(&self, node: &Node, dout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    add_into(&mut grads[a.0], &matmul_raw(dout, &bt, m, n, k));
                }
                if self.rg(*b) {
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    add_into(&mut grads[b.0], &matmul_raw(&at, dout, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                add_into(&mut grads[a.0], &transpose_raw(dout, s[0], s[1]));
            }
            Op::Reshape(a) => add_into(&mut grads[a.0], dout),
            Op::Affine { x, w, b } => {
                let sw = self.shape(*w);
                let (cin, cout) = (sw[0], sw[1]);
                let rows = dout.len() / cout;
                if self.rg(*x) {
                    let wt = transpose_raw(self.value(*w).data(), cin, cout);
                    add_into(&mut grads[x.0], &matmul_raw(dout, &wt, rows, cout, cin));
                }
                if self.rg(*w) {
                    let xt = transpose_raw(self.value(*x).data(), rows, cin);
                    add_into(&mut grads[w.0], &matmul_raw(&xt, dout, cin, rows, cout));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; cout];
                        for row in dout.chunks(cout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        add_into(&mut grads[b.0], &db);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let c = inv_std.len();
                let rows = dout.len() / c;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (drow, hrow) in dout.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        dgamma[ch] += drow[ch] * hrow[ch];
                        dbeta[ch] += drow[ch];
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; dout.len()];
                    if *training {
                        let n = rows as f64;
                        for (r, (drow, hrow)) in dout.chunks(c).zip(xhat.chunks(c)).enumerate() {
                            for ch in 0..c {
                                let dxhat = drow[ch] * g[ch];
                                let sum_dxhat = dbeta[ch] * g[ch];
                                let sum_dxhat_xhat = dgamma[ch] * g[ch];
                                dx[r * c + ch] = inv_std[ch] / n * (n * dxhat - sum_dxhat - hrow[ch] * sum_dxhat_xhat);
                            }
                        }
                    } else {
                        for (r, drow) in dout.chunks(c).enumerate() {
                            for ch in 0..c {
                                dx[r * c + ch] = drow[ch] * g[ch] * inv_std[ch];
                            }
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                if self.rg(*gamma) {
                    add_into(&mut grads[gamma.0], &dgamma);
                }
                if self.rg(*beta) {
                    add_into(&mut grads[beta.0], &dbeta);
                }
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = dout
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                add_into(&mut grads[x.0], &dx);
            }
            Op::MaxReduce { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (d, &i) in dout.iter().zip(argmax) {
                    dx[i] += d;
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], dout);
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], dout);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let da: Vec<f64> = dout.iter().zip(vb).map(|(d, v)| d * v).collect();
                    add_into(&mut grads[a.0], &da);
                }
                if self.rg(*b) {
                    let db: Vec<f64> = dout.iter().zip(va).map(|(d, v)| d * v).collect();
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Scale { x, s } => {
                let factor = self.value(*s).data()[0];
                if self.rg(*x) {
                    let dx: Vec<f64> = dout.iter().map(|d| d * factor).collect();
                    add_into(&mut grads[x.0], &dx);
                }
                if self.rg(*s) {
                    let ds: f64 = dout.iter().zip(self.value(*x).data()).map(|(d, v)| d * v).sum();
                    add_into(&mut grads[s.0], &[ds]);
                }
            }
            Op::ScaleConst(x, factor) => {
                let dx: Vec<f64> = dout.iter().map(|d| d * factor).collect();
                add_into(&mut grads[x.0], &dx);
            }
            Op::Softmax { x, mode } => {
                let y = node.value.data();
                let width = match mode {
                    SoftmaxMode::Row => node.value.channels(),
                    SoftmaxMode::Global => y.len(),
                };
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), dr) in dx.chunks_mut(width).zip(y.chunks(width)).zip(dout.chunks(width)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((o, yv), dv) in dxr.iter_mut().zip(yr).zip(dr) {
                        *o = yv * (dv - dot);
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::CrossEntropy { scores, probs, labels } => {
                let c = probs.len() / labels.len();
                let scale = dout[0] / labels.len() as f64;
                let mut dx = probs.clone();
                for (row, &label) in dx.chunks_mut(c).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                add_into(&mut grads[scores.0], &dx);
            }
            Op::Sum(x) => {
                let dx = vec![dout[0]; self.value(*x).numel()];
                add_into(&mut grads[x.0], &dx);
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = dout.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&dout[r * total + offset..r * total + offset + w]);
                        }
                        add_into(&mut grads[p.0], &dp);
                    }
                    offset += w;
                }
            }
            Op::Gather { x, rows } => {
                let t = self.value(*x).channels();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for (o, d) in dx[r * t..(r + 1) * t].iter_mut().zip(&dout[k * t..(k + 1) * t]) {
                        *o += d;
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::WeightedRows { x, weights } => {
                let t = self.value(*x).channels();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (q, list) in weights.iter().enumerate() {
                    let dr = &dout[q * t..(q + 1) * t];
                    for &(i, w) in list {
                        for (o, d) in dx[i * t..(i + 1) * t].iter_mut().zip(dr) {
                            *o += w * d;
                        }
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
        }
    }
}
