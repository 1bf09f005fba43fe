//! Reverse-mode tape. Nodes are appended in execution order, so the node
//! list is already a topological order and backward is a single reverse
//! sweep.

use super::kernels::{gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn, softmax_in_place, transpose};
use super::{matrix_dims, Element, Tensor};
use crate::error::TensorError;
use crate::rng::StreamRng;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    Gelu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    MeanPool { x: Var, group: usize },
    Mask { x: Var, mask: Vec<T> },
    Attention { q: Var, k: Var, v: Var, seqs: usize, heads: usize, probs: Vec<T> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::MeanPool { .. } => "mean_pool",
            Op::Mask { .. } => "dropout",
            Op::Attention { .. } => "attention",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } => vec![*a, *b],
            Op::Transpose { a } => vec![*a],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Scale { x, .. } | Op::Gelu { x } | Op::MeanPool { x, .. } | Op::Mask { x, .. } => {
                vec![*x]
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient with respect to `v`; zeros if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Borrowed gradient data, `None` when it is identically zero.
    pub fn data(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

fn mismatch<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Every leaf recorded so far, in creation order.
    pub fn leaves(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf))
            .map(Var)
            .collect()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var, TensorError> {
        let inputs = op.inputs();
        if !value.all_finite() && inputs.iter().all(|&i| self.nodes[i.0].value.all_finite()) {
            return Err(TensorError::Invalid(format!(
                "{} produced non-finite output from finite inputs",
                op.name()
            )));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(bv)?;
        self.push(out, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose { a })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(out, Op::Add { a, b })
    }

    /// `x[n×m] + bias[m]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, m) = matrix_dims(xv, "add_bias")?;
        if bv.numel() != m {
            return Err(mismatch("add_bias", xv, bv));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(m) {
            for (r, &b) in row.iter_mut().zip(bv.data()) {
                *r += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        let f = T::of(factor);
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * f).collect())?;
        self.push(out, Op::Scale { x, factor: f })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| gelu(v)).collect())?;
        self.push(out, Op::Gelu { x })
    }

    /// Per-row layer normalization with elementwise gain and bias of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (n, m) = matrix_dims(xv, "layer_norm")?;
        if gv.numel() != m || bv.numel() != m {
            return Err(mismatch("layer_norm", xv, gv));
        }
        let eps = T::of(LN_EPS);
        let inv_m = T::one() / T::of(m as f64);
        let mut xhat = vec![T::zero(); n * m];
        let mut inv_std = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let row = &xv.data()[i * m..(i + 1) * m];
            let mean = row.iter().copied().sum::<T>() * inv_m;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                let h = (row[j] - mean) * is;
                xhat[i * m + j] = h;
                out[i * m + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Rows of `table[V×d]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        let (vocab, d) = matrix_dims(tv, "embedding")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Invalid(format!(
                    "token id {id} outside vocabulary of {vocab}"
                )));
            }
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push(out, Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Averages consecutive groups of `group` rows: `[G·group × d] -> [G × d]`.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (n, d) = matrix_dims(xv, "mean_pool")?;
        if group == 0 || n % group != 0 {
            return Err(TensorError::Invalid(format!(
                "mean_pool: {n} rows not divisible into groups of {group}"
            )));
        }
        let g = n / group;
        let inv = T::one() / T::of(group as f64);
        let mut out = vec![T::zero(); g * d];
        for (r, row) in xv.data().chunks(d).enumerate() {
            let o = &mut out[(r / group) * d..(r / group + 1) * d];
            for (oj, &v) in o.iter_mut().zip(row) {
                *oj += v * inv;
            }
        }
        let out = Tensor::new(vec![g, d], out)?;
        self.push(out, Op::MeanPool { x, group })
    }

    /// Elementwise multiplication by a constant mask (the dropout mechanism).
    pub fn apply_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(TensorError::Invalid(format!(
                "mask of {} values for tensor of {}",
                mask.len(),
                xv.numel()
            )));
        }
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::Mask { x, mask })
    }

    /// Inverted dropout: keep with probability `1 - p`, scale kept values by
    /// `1 / (1 - p)`. `p == 0` returns `x` unchanged and draws nothing.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut StreamRng) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid(format!("dropout probability {p}")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask = (0..n)
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect();
        self.apply_mask(x, mask)
    }

    /// Multi-head scaled dot-product self-attention without masking.
    ///
    /// `q`, `k`, `v` are `[seqs·L × d]`; each group of `L` rows is one
    /// sequence and `d` splits into `heads` contiguous column blocks.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seqs: usize,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() {
            return Err(mismatch("attention", qv, kv));
        }
        if qv.shape() != vv.shape() {
            return Err(mismatch("attention", qv, vv));
        }
        let (n, d) = matrix_dims(qv, "attention")?;
        if seqs == 0 || n % seqs != 0 || heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "attention: [{n}×{d}] does not split into {seqs} sequences and {heads} heads"
            )));
        }
        let len = n / seqs;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::zero(); n * d];
        let mut probs = vec![T::zero(); seqs * heads * len * len];
        let mut qh = vec![T::zero(); len * dh];
        let mut kh = vec![T::zero(); len * dh];
        let mut vh = vec![T::zero(); len * dh];
        let mut oh = vec![T::zero(); len * dh];
        for s in 0..seqs {
            for h in 0..heads {
                gather(qv.data(), &mut qh, s, h, len, d, dh);
                gather(kv.data(), &mut kh, s, h, len, d, dh);
                gather(vv.data(), &mut vh, s, h, len, d, dh);
                let p = &mut probs[(s * heads + h) * len * len..(s * heads + h + 1) * len * len];
                gemm_nt(&qh, &kh, p, len, dh, len);
                for row in p.chunks_mut(len) {
                    for x in row.iter_mut() {
                        *x *= scale;
                    }
                    softmax_in_place(row);
                }
                oh.iter_mut().for_each(|x| *x = T::zero());
                gemm_nn(p, &vh, &mut oh, len, len, dh);
                scatter_add(&oh, &mut out, s, h, len, d, dh);
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        self.push(out, Op::Attention { q, k, v, seqs, heads, probs })
    }

    /// Mean softmax cross-entropy over rows of `logits[n×K]`; returns a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let (n, classes) = matrix_dims(lv, "softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        for (row, &y) in lv.data().chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            total += (lse - row[y]).as_f64();
        }
        for row in probs.chunks_mut(classes) {
            softmax_in_place(row);
        }
        let out = Tensor::scalar(T::of(total / n as f64));
        self.push(out, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads, shapes })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k) = (av.shape()[0], av.shape()[1]);
                let m = bv.shape()[1];
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], n * k, |g| gemm_nt(dy, bv.data(), g, n, m, k));
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], k * m, |g| gemm_tn(av.data(), dy, g, k, n, m));
                }
            }
            Op::Transpose { a } => {
                if self.needs(*a) {
                    let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                    let t = transpose(dy, n, m);
                    accumulate(&mut grads[a.0], n * m, |g| add_into(g, &t));
                }
            }
            Op::Add { a, b } => {
                for x in [a, b] {
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], dy.len(), |g| add_into(g, dy));
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], dy.len(), |g| add_into(g, dy));
                }
                if self.needs(*bias) {
                    let m = self.value(*bias).numel();
                    accumulate(&mut grads[bias.0], m, |g| {
                        for row in dy.chunks(m) {
                            add_into(g, row);
                        }
                    });
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], dy.len(), |g| {
                        for (gi, &d) in g.iter_mut().zip(dy) {
                            *gi += d * *factor;
                        }
                    });
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    accumulate(&mut grads[x.0], dy.len(), |g| {
                        for ((gi, &d), &xi) in g.iter_mut().zip(dy).zip(xv) {
                            *gi += d * gelu_grad(xi);
                        }
                    });
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain).data();
                let m = gv.len();
                let n = inv_std.len();
                if self.needs(*gain) {
                    accumulate(&mut grads[gain.0], m, |g| {
                        for (drow, hrow) in dy.chunks(m).zip(xhat.chunks(m)) {
                            for j in 0..m {
                                g[j] += drow[j] * hrow[j];
                            }
                        }
                    });
                }
                if self.needs(*bias) {
                    accumulate(&mut grads[bias.0], m, |g| {
                        for drow in dy.chunks(m) {
                            add_into(g, drow);
                        }
                    });
                }
                if self.needs(*x) {
                    let inv_m = T::one() / T::of(m as f64);
                    accumulate(&mut grads[x.0], n * m, |g| {
                        let mut dxhat = vec![T::zero(); m];
                        for i in 0..n {
                            let drow = &dy[i * m..(i + 1) * m];
                            let hrow = &xhat[i * m..(i + 1) * m];
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for j in 0..m {
                                dxhat[j] = drow[j] * gv[j];
                                s1 += dxhat[j];
                                s2 += dxhat[j] * hrow[j];
                            }
                            s1 *= inv_m;
                            s2 *= inv_m;
                            let grow = &mut g[i * m..(i + 1) * m];
                            for j in 0..m {
                                grow[j] += inv_std[i] * (dxhat[j] - s1 - hrow[j] * s2);
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let d = tv.shape()[1];
                    accumulate(&mut grads[table.0], tv.numel(), |g| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut g[id * d..(id + 1) * d], &dy[r * d..(r + 1) * d]);
                        }
                    });
                }
            }
            Op::MeanPool { x, group } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let d = xv.shape()[1];
                    let inv = T::one() / T::of(*group as f64);
                    accumulate(&mut grads[x.0], xv.numel(), |g| {
                        for (r, grow) in g.chunks_mut(d).enumerate() {
                            let drow = &dy[(r / group) * d..(r / group + 1) * d];
                            for (gi, &dv) in grow.iter_mut().zip(drow) {
                                *gi += dv * inv;
                            }
                        }
                    });
                }
            }
            Op::Mask { x, mask } => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], dy.len(), |g| {
                        for ((gi, &d), &m) in g.iter_mut().zip(dy).zip(mask) {
                            *gi += d * m;
                        }
                    });
                }
            }
            Op::Attention { q, k, v, seqs, heads, probs } => {
                self.attention_backward(dy, *q, *k, *v, *seqs, *heads, probs, grads);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if self.needs(*logits) {
                    let n = labels.len();
                    let classes = probs.len() / n;
                    let coef = dy[0] / T::of(n as f64);
                    accumulate(&mut grads[logits.0], probs.len(), |g| {
                        for (i, &y) in labels.iter().enumerate() {
                            for c in 0..classes {
                                let onehot = if c == y { T::one() } else { T::zero() };
                                g[i * classes + c] += coef * (probs[i * classes + c] - onehot);
                            }
                        }
                    });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        dy: &[T],
        q: Var,
        k: Var,
        v: Var,
        seqs: usize,
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qv.shape()[0], qv.shape()[1]);
        let len = n / seqs;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (nq, nk, nv) = (self.needs(q), self.needs(k), self.needs(v));
        let mut dq = if nq { vec![T::zero(); n * d] } else { vec![] };
        let mut dk = if nk { vec![T::zero(); n * d] } else { vec![] };
        let mut dv = if nv { vec![T::zero(); n * d] } else { vec![] };
        let mut qh = vec![T::zero(); len * dh];
        let mut kh = vec![T::zero(); len * dh];
        let mut vh = vec![T::zero(); len * dh];
        let mut doh = vec![T::zero(); len * dh];
        let mut tmp = vec![T::zero(); len * dh];
        let mut dp = vec![T::zero(); len * len];
        for s in 0..seqs {
            for h in 0..heads {
                let p = &probs[(s * heads + h) * len * len..(s * heads + h + 1) * len * len];
                gather(dy, &mut doh, s, h, len, d, dh);
                if nv {
                    tmp.iter_mut().for_each(|x| *x = T::zero());
                    gemm_tn(p, &doh, &mut tmp, len, len, dh);
                    scatter_add(&tmp, &mut dv, s, h, len, d, dh);
                }
                if !(nq || nk) {
                    continue;
                }
                gather(vv.data(), &mut vh, s, h, len, d, dh);
                dp.iter_mut().for_each(|x| *x = T::zero());
                gemm_nt(&doh, &vh, &mut dp, len, dh, len);
                // softmax Jacobian, then the 1/sqrt(dh) score scale
                for (prow, drow) in p.chunks(len).zip(dp.chunks_mut(len)) {
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (dj, &pj) in drow.iter_mut().zip(prow) {
                        *dj = pj * (*dj - dot) * scale;
                    }
                }
                if nq {
                    gather(kv.data(), &mut kh, s, h, len, d, dh);
                    tmp.iter_mut().for_each(|x| *x = T::zero());
                    gemm_nn(&dp, &kh, &mut tmp, len, len, dh);
                    scatter_add(&tmp, &mut dq, s, h, len, d, dh);
                }
                if nk {
                    gather(qv.data(), &mut qh, s, h, len, d, dh);
                    tmp.iter_mut().for_each(|x| *x = T::zero());
                    gemm_tn(&dp, &qh, &mut tmp, len, len, dh);
                    scatter_add(&tmp, &mut dk, s, h, len, d, dh);
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if !buf.is_empty() {
                accumulate(&mut grads[var.0], n * d, |g| add_into(g, &buf));
            }
        }
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn gather<T: Element>(src: &[T], dst: &mut [T], s: usize, h: usize, len: usize, d: usize, dh: usize) {
    for i in 0..len {
        let row = (s * len + i) * d + h * dh;
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[row..row + dh]);
    }
}

fn scatter_add<T: Element>(src: &[T], dst: &mut [T], s: usize, h: usize, len: usize, d: usize, dh: usize) {
    for i in 0..len {
        let row = (s * len + i) * d + h * dh;
        add_into(&mut dst[row..row + dh], &src[i * dh..(i + 1) * dh]);
    }
}
