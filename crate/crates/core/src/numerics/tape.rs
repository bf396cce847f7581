//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar consumes the tape and returns gradients for
//! every leaf created with `requires_grad = true`. Leaves may borrow their
//! value (model parameters) so binding a parameter store is free.

use std::borrow::Cow;

use super::attention::{self, AttentionSpec};
use super::tensor::{axis_split, gemm, Mat, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Tanh(Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Sum {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        rel: Option<Var>,
        spec: Box<AttentionSpec>,
        weights: Vec<f64>,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by tape [`Var`]; only leaves are retained.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that borrows its value, typically a model parameter.
    pub fn leaf_ref(&mut self, value: &'p Tensor, requires_grad: bool) -> Var {
        self.push_node(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_node(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push_node(Cow::Owned(value), op, rg)
    }

    /// 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            Mat::new(self.value(a).data(), m, k),
            Mat::new(self.value(b).data(), k, n),
            &mut out,
            0.0,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum; `b` broadcasts against `a` (numpy rules, output takes `a`'s shape).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = Broadcast::new(self.shape(a), self.shape(b), "add")?;
        let mut out = self.value(a).data().to_vec();
        let bd = self.value(b).data();
        map.for_each(|i, j| out[i] += bd[j]);
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    /// Elementwise product; `b` broadcasts against `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = Broadcast::new(self.shape(a), self.shape(b), "mul")?;
        let mut out = self.value(a).data().to_vec();
        let bd = self.value(b).data();
        map.for_each(|i, j| out[i] *= bd[j]);
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect())
            .expect("same shape");
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |v| v + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        self.push(value, op, &[a])
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = t.axis_split(axis)?;
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalization along `axis` with per-position `gain` and `bias` of that axis' length.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        const EPS: f64 = 1e-12;
        let t = self.value(x);
        let (outer, n, inner) = t.axis_split(axis)?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", t.shape(), self.shape(gain)));
        }
        let src = t.data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| src[at(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (src[at(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + EPS).sqrt();
                inv_std[o * inner + i] = is;
                for j in 0..n {
                    let xh = (src[at(j)] - mean) * is;
                    xhat[at(j)] = xh;
                    out[at(j)] = xh * g[j] + b[j];
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            axis,
            xhat,
            inv_std,
        };
        Ok(self.push(value, op, &[x, gain, bias]))
    }

    /// Channels-last 1-D convolution, stride 1, same padding.
    /// `x: [batch, len, c_in]`, `w: [kernel, c_in, c_out]` (odd kernel), `b: [c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[2] || sw[0] % 2 == 0 {
            return Err(Error::shape("conv1d", sx, sw));
        }
        let (batch, len, c_in) = (sx[0], sx[1], sx[2]);
        let (kernel, c_out) = (sw[0], sw[2]);
        if self.shape(b) != [c_out] {
            return Err(Error::shape("conv1d.bias", self.shape(b), &[c_out]));
        }
        let mut out = vec![0.0; batch * len * c_out];
        let bias = self.value(b).data();
        for row in out.chunks_mut(c_out) {
            row.copy_from_slice(bias);
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for bi in 0..batch {
            for tap in 0..kernel {
                let Some((lo, hi, shift)) = conv_rows(len, kernel, tap) else {
                    continue;
                };
                let rows = hi - lo;
                let src = &xd[(bi * len + lo + shift - kernel / 2) * c_in..][..rows * c_in];
                let dst = &mut out[(bi * len + lo) * c_out..][..rows * c_out];
                gemm(
                    Mat::new(src, rows, c_in),
                    Mat::new(&wd[tap * c_in * c_out..][..c_in * c_out], c_in, c_out),
                    dst,
                    1.0,
                );
            }
        }
        let value = Tensor::new(vec![batch, len, c_out], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b }, &[x, w, b]))
    }

    /// Mean cross-entropy of `logits: [n, vocab]` against `targets`; rows whose
    /// target equals `ignore` do not contribute.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != targets.len() {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        let vocab = t.shape()[1];
        let mut probs = vec![0.0; t.numel()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, (row, &target)) in t.data().chunks(vocab).zip(targets).enumerate() {
            if target == ignore {
                continue;
            }
            if target >= vocab {
                return Err(Error::invalid(format!("target id {target} >= vocab {vocab}")));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[target];
            for (p, v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            ignore,
            probs,
            count,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = t.axis_split(axis)?;
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Sum { x, axis }, &[x]))
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.value(x).axis_split(axis)?.1;
        let s = self.sum(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = axis_split(&base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        Ok(self.push(value, op, parts))
    }

    /// Gathers rows of `table: [vocab, d]`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embedding", t.shape(), &[ids.len()]));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::invalid(format!("token id {id} >= vocab {vocab}")));
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(value, op, &[table]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Fused multi-head attention; see [`AttentionSpec`].
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        rel: Option<Var>,
        spec: AttentionSpec,
    ) -> Result<Var> {
        let d = spec.validate(
            self.shape(q),
            self.shape(k),
            self.shape(v),
            rel.map(|r| self.shape(r)),
        )?;
        let (out, weights) = attention::forward(
            &spec,
            d,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            rel.map(|r| self.value(r).data()),
        );
        let value = Tensor::new(vec![spec.batch * spec.q_len, d], out)?;
        let mut inputs = vec![q, k, v];
        inputs.extend(rel);
        let op = Op::Attention {
            q,
            k,
            v,
            rel,
            spec: Box::new(spec),
            weights,
        };
        Ok(self.push(value, op, &inputs))
    }

    /// Attention weights recorded by an attention node, `[batch, heads, q_len, kv_len]`.
    pub fn attention_weights(&self, var: Var) -> Option<&[f64]> {
        match &self.nodes[var.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let l = &self.nodes[loss.0].value;
        if l.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                l.shape()
            )));
        }
        if !l.is_finite() {
            return Err(Error::numeric("backward on a non-finite loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(l.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.rg(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, var: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(var).to_vec(), data).expect("gradient matches its input shape")
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        Mat::new(gd, m, n),
                        Mat::new(self.value(*b).data(), k, n).t(),
                        &mut ga,
                        0.0,
                    );
                    self.accumulate(grads, *a, self.like(*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        Mat::new(self.value(*a).data(), m, k).t(),
                        Mat::new(gd, m, n),
                        &mut gb,
                        0.0,
                    );
                    self.accumulate(grads, *b, self.like(*b, gb));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    let map = Broadcast::new(self.shape(*a), self.shape(*b), "add")?;
                    let mut gb = vec![0.0; self.value(*b).numel()];
                    map.for_each(|i, j| gb[j] += gd[i]);
                    self.accumulate(grads, *b, self.like(*b, gb));
                }
            }
            Op::Mul(a, b) => {
                let map = Broadcast::new(self.shape(*a), self.shape(*b), "mul")?;
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let mut ga = vec![0.0; ad.len()];
                    map.for_each(|i, j| ga[i] = gd[i] * bd[j]);
                    self.accumulate(grads, *a, self.like(*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; bd.len()];
                    map.for_each(|i, j| gb[j] += gd[i] * ad[i]);
                    self.accumulate(grads, *b, self.like(*b, gb));
                }
            }
            Op::Scale(a, s) => {
                let ga = gd.iter().map(|v| v * s).collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, self.like(*a, gd.to_vec()));
            }
            Op::Exp(a) => {
                let ga = gd.iter().zip(out).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Tanh(a) => {
                let ga = gd.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Relu(a) => {
                let xd = self.value(*a).data();
                let ga = gd
                    .iter()
                    .zip(xd)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(g.shape(), *axis)?;
                let mut gx = vec![0.0; gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dotp: f64 = (0..n).map(|j| gd[at(j)] * out[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = out[at(j)] * (gd[at(j)] - dotp);
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            } => {
                let (outer, n, inner) = axis_split(g.shape(), *axis)?;
                let gain_d = self.value(*gain).data();
                let mut gx = vec![0.0; gd.len()];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for j in 0..n {
                            let gh = gd[at(j)] * gain_d[j];
                            mean_g += gh;
                            mean_gx += gh * xhat[at(j)];
                            gg[j] += gd[at(j)] * xhat[at(j)];
                            gb[j] += gd[at(j)];
                        }
                        mean_g /= n as f64;
                        mean_gx /= n as f64;
                        let is = inv_std[o * inner + i];
                        for j in 0..n {
                            let gh = gd[at(j)] * gain_d[j];
                            gx[at(j)] = is * (gh - mean_g - xhat[at(j)] * mean_gx);
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, gx));
                self.accumulate(grads, *gain, self.like(*gain, gg));
                self.accumulate(grads, *bias, self.like(*bias, gb));
            }
            Op::Conv1d { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (batch, len, c_in) = (sx[0], sx[1], sx[2]);
                let (kernel, c_out) = (sw[0], sw[2]);
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                for bi in 0..batch {
                    for tap in 0..kernel {
                        let Some((lo, hi, shift)) = conv_rows(len, kernel, tap) else {
                            continue;
                        };
                        let rows = hi - lo;
                        let src_off = (bi * len + lo + shift - kernel / 2) * c_in;
                        let g_rows = Mat::new(&gd[(bi * len + lo) * c_out..][..rows * c_out], rows, c_out);
                        let w_tap = &wd[tap * c_in * c_out..][..c_in * c_out];
                        gemm(
                            g_rows,
                            Mat::new(w_tap, c_in, c_out).t(),
                            &mut gx[src_off..src_off + rows * c_in],
                            1.0,
                        );
                        gemm(
                            Mat::new(&xd[src_off..src_off + rows * c_in], rows, c_in).t(),
                            g_rows,
                            &mut gw[tap * c_in * c_out..(tap + 1) * c_in * c_out],
                            1.0,
                        );
                    }
                }
                let mut gb = vec![0.0; c_out];
                for row in gd.chunks(c_out) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *x, self.like(*x, gx));
                self.accumulate(grads, *w, self.like(*w, gw));
                self.accumulate(grads, *b, self.like(*b, gb));
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let vocab = self.shape(*logits)[1];
                let mut gl = vec![0.0; probs.len()];
                if *count > 0 {
                    let s = gd[0] / *count as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let row = &mut gl[r * vocab..(r + 1) * vocab];
                        for (gv, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *gv = s * p;
                        }
                        row[t] -= s;
                    }
                }
                self.accumulate(grads, *logits, self.like(*logits, gl));
            }
            Op::Sum { x, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis)?;
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        gx[(o * n + j) * inner..(o * n + j + 1) * inner].copy_from_slice(src);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::SumAll(x) => {
                let gx = vec![gd[0]; self.value(*x).numel()];
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis)?;
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&gd[start..start + n * inner]);
                        }
                        self.accumulate(grads, p, self.like(p, gp));
                    }
                    offset += n;
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut gt = vec![0.0; self.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, v) in gt[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *table, self.like(*table, gt));
            }
            Op::Attention {
                q,
                k,
                v,
                rel,
                spec,
                weights,
            } => {
                let d = self.shape(*q)[1];
                let ag = attention::backward(
                    spec,
                    d,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    rel.map(|r| self.value(r).data()),
                    weights,
                    gd,
                );
                self.accumulate(grads, *q, self.like(*q, ag.q));
                self.accumulate(grads, *k, self.like(*k, ag.k));
                self.accumulate(grads, *v, self.like(*v, ag.v));
                if let (Some(r), Some(gr)) = (rel, ag.rel) {
                    self.accumulate(grads, *r, self.like(*r, gr));
                }
            }
        }
        Ok(())
    }
}

/// Valid output rows `[lo, hi)` for one kernel tap, plus the tap index.
fn conv_rows(len: usize, kernel: usize, tap: usize) -> Option<(usize, usize, usize)> {
    let pad = kernel / 2;
    let lo = pad.saturating_sub(tap);
    let hi = (len + pad).saturating_sub(tap).min(len);
    (lo < hi).then_some((lo, hi, tap))
}

/// Index mapping for broadcasting `rhs` onto `lhs`'s shape.
enum Broadcast {
    Same(usize),
    /// `rhs` is a single row repeated over leading axes.
    Row { n: usize, row: usize },
    General(Vec<usize>),
}

impl Broadcast {
    fn new(lhs: &[usize], rhs: &[usize], op: &'static str) -> Result<Self> {
        if lhs == rhs {
            return Ok(Broadcast::Same(lhs.iter().product()));
        }
        if rhs.len() > lhs.len() {
            return Err(Error::shape(op, lhs, rhs));
        }
        let pad = lhs.len() - rhs.len();
        let aligned: Vec<usize> = std::iter::repeat(1).take(pad).chain(rhs.iter().copied()).collect();
        if aligned.iter().zip(lhs).any(|(&r, &l)| r != l && r != 1) {
            return Err(Error::shape(op, lhs, rhs));
        }
        let n: usize = lhs.iter().product();
        let rhs_n: usize = rhs.iter().product();
        if let Some(&last) = lhs.last() {
            let leading_ones = aligned[..aligned.len() - 1].iter().all(|&r| r == 1);
            if leading_ones && aligned[aligned.len() - 1] == last {
                return Ok(Broadcast::Row { n, row: last });
            }
        }
        // Row-major strides of rhs, zeroed along broadcast axes.
        let mut strides = vec![0; lhs.len()];
        let mut acc = 1;
        for d in (0..lhs.len()).rev() {
            strides[d] = if aligned[d] == 1 { 0 } else { acc };
            acc *= aligned[d];
        }
        debug_assert_eq!(acc, rhs_n);
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0; lhs.len()];
        for _ in 0..n {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..lhs.len()).rev() {
                idx[d] += 1;
                if idx[d] < lhs[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Broadcast::General(map))
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        match self {
            Broadcast::Same(n) => (0..*n).for_each(|i| f(i, i)),
            Broadcast::Row { n, row } => (0..*n).for_each(|i| f(i, i % row)),
            Broadcast::General(map) => map.iter().enumerate().for_each(|(i, &j)| f(i, j)),
        }
    }
}
