//! Reverse-mode autodiff tape.
//!
//! Every operation appends a node holding the produced value, its parent
//! node ids, and a backward closure. Tape order is a topological order, so
//! the backward pass is a single reverse sweep that visits each node once
//! and accumulates gradients additively across fan-out.

use rand::Rng;

use super::*;
use crate::error::{Error, Result};

type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct NodeMeta {
    parents: Vec<usize>,
    backward: Option<BackFn>,
    requires_grad: bool,
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    metas: Vec<NodeMeta>,
}

/// Gradients produced by [`Tape::backward`], indexed by `Var`.
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

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.values[var.0]
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackFn>,
    ) -> Var {
        value.debug_assert_finite(name);
        let requires_grad = parents.iter().any(|&p| self.metas[p].requires_grad);
        self.values.push(value);
        self.metas.push(NodeMeta {
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
        });
        Var(self.values.len() - 1)
    }

    /// Inserts an input tensor. Only leaves with `requires_grad` (and nodes
    /// derived from them) participate in the backward sweep.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        value.debug_assert_finite("leaf");
        self.values.push(value);
        self.metas.push(NodeMeta {
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Computes gradients of a scalar loss for every reachable node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.metas[loss.0].requires_grad {
            return Err(Error::InvalidArgument(
                "backward: loss does not depend on any differentiable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            let meta = &self.metas[id];
            let Some(backward) = &meta.backward else { continue };
            let gy = grads[id].take().unwrap();
            let parent_values: Vec<&Tensor> = meta.parents.iter().map(|&p| &self.values[p]).collect();
            let parent_grads = backward(&gy, &parent_values, &self.values[id]);
            debug_assert_eq!(parent_grads.len(), meta.parents.len());
            for (&p, g) in meta.parents.iter().zip(parent_grads) {
                if !self.metas[p].requires_grad {
                    continue;
                }
                g.debug_assert_finite("backward");
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
            grads[id] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    // ---- elementwise and broadcast ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push(
            "add",
            value,
            vec![a.0, b.0],
            Some(Box::new(|gy, _, _| vec![gy.clone(), gy.clone()])),
        )
    }

    /// Sum of any number of same-shaped tensors.
    pub fn add_n(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty(), "add_n: empty term list");
        let shape = self.value(terms[0]).shape().to_vec();
        let mut data = vec![0.0; self.value(terms[0]).numel()];
        for &t in terms {
            assert_eq!(self.value(t).shape(), &shape[..], "add_n: shape mismatch");
            for (o, v) in data.iter_mut().zip(self.value(t).data()) {
                *o += v;
            }
        }
        let n = terms.len();
        self.push(
            "add_n",
            Tensor::new(shape, data),
            terms.iter().map(|v| v.0).collect(),
            Some(Box::new(move |gy, _, _| vec![gy.clone(); n])),
        )
    }

    /// `x + bias` where `bias` has the length of x's last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(bias));
        let cols = *tx.shape().last().unwrap();
        assert_eq!(tb.shape(), &[cols], "add_bias: bias must be [last_axis]");
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data);
        self.push(
            "add_bias",
            value,
            vec![x.0, bias.0],
            Some(Box::new(move |gy, _, _| {
                let mut gb = vec![0.0; cols];
                for row in gy.data().chunks(cols) {
                    for (o, g) in gb.iter_mut().zip(row) {
                        *o += g;
                    }
                }
                vec![gy.clone(), Tensor::new(vec![cols], gb)]
            })),
        )
    }

    /// `x * scale` broadcast over the last axis (e.g. a layer-norm gain).
    pub fn mul_bias(&mut self, x: Var, scale: Var) -> Var {
        let (tx, ts) = (self.value(x), self.value(scale));
        let cols = *tx.shape().last().unwrap();
        assert_eq!(ts.shape(), &[cols], "mul_bias: scale must be [last_axis]");
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (o, s) in row.iter_mut().zip(ts.data()) {
                *o *= s;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data);
        self.push(
            "mul_bias",
            value,
            vec![x.0, scale.0],
            Some(Box::new(move |gy, parents, _| {
                let (x, s) = (parents[0], parents[1]);
                let mut gx = gy.data().to_vec();
                for row in gx.chunks_mut(cols) {
                    for (o, sv) in row.iter_mut().zip(s.data()) {
                        *o *= sv;
                    }
                }
                let mut gs = vec![0.0; cols];
                for (grow, xrow) in gy.data().chunks(cols).zip(x.data().chunks(cols)) {
                    for ((o, g), xv) in gs.iter_mut().zip(grow).zip(xrow) {
                        *o += g * xv;
                    }
                }
                vec![
                    Tensor::new(gy.shape().to_vec(), gx),
                    Tensor::new(vec![cols], gs),
                ]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push(
            "mul",
            value,
            vec![a.0, b.0],
            Some(Box::new(|gy, parents, _| {
                let (a, b) = (parents[0], parents[1]);
                let ga = gy.data().iter().zip(b.data()).map(|(g, v)| g * v).collect();
                let gb = gy.data().iter().zip(a.data()).map(|(g, v)| g * v).collect();
                vec![
                    Tensor::new(a.shape().to_vec(), ga),
                    Tensor::new(b.shape().to_vec(), gb),
                ]
            })),
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(tx.shape().to_vec(), data);
        self.push(
            "scale",
            value,
            vec![x.0],
            Some(Box::new(move |gy, _, _| {
                let g = gy.data().iter().map(|v| v * c).collect();
                vec![Tensor::new(gy.shape().to_vec(), g)]
            })),
        )
    }

    /// Multiplies each row of `x: [rows, cols]` by a constant factor.
    pub fn mul_rowmask(&mut self, x: Var, rowmask: &[f64]) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 2, "mul_rowmask expects rank 2");
        let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
        assert_eq!(rowmask.len(), rows, "mul_rowmask: mask length");
        let mut data = tx.data().to_vec();
        for (r, row) in data.chunks_mut(cols).enumerate() {
            for v in row {
                *v *= rowmask[r];
            }
        }
        let mask: Vec<f64> = rowmask.to_vec();
        self.push(
            "mul_rowmask",
            Tensor::new(vec![rows, cols], data),
            vec![x.0],
            Some(Box::new(move |gy, _, _| {
                let mut g = gy.data().to_vec();
                for (r, row) in g.chunks_mut(cols).enumerate() {
                    for v in row {
                        *v *= mask[r];
                    }
                }
                vec![Tensor::new(gy.shape().to_vec(), g)]
            })),
        )
    }

    /// Adds a constant tensor (no gradient flows into the constant).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.shape(), c.shape(), "add_const: shape mismatch");
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let value = Tensor::new(tx.shape().to_vec(), data);
        self.push(
            "add_const",
            value,
            vec![x.0],
            Some(Box::new(|gy, _, _| vec![gy.clone()])),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), self.value(b));
        self.push(
            "matmul",
            value,
            vec![a.0, b.0],
            Some(Box::new(|gy, parents, _| {
                vec![
                    matmul_transpose_b(gy, parents[1]),
                    matmul_transpose_a(parents[0], gy),
                ]
            })),
        )
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let value = bmm(self.value(a), self.value(b));
        self.push(
            "bmm",
            value,
            vec![a.0, b.0],
            Some(Box::new(|gy, parents, _| {
                let bt = transpose_last2(parents[1]);
                let at = transpose_last2(parents[0]);
                vec![bmm(gy, &bt), bmm(&at, gy)]
            })),
        )
    }

    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let value = transpose_last2(self.value(x));
        self.push(
            "transpose_last2",
            value,
            vec![x.0],
            Some(Box::new(|gy, _, _| vec![transpose_last2(gy)])),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let tx = self.value(x);
        let old_shape = tx.shape().to_vec();
        let value = tx.reshaped(shape);
        self.push(
            "reshape",
            value,
            vec![x.0],
            Some(Box::new(move |gy, _, _| vec![gy.reshaped(old_shape.clone())])),
        )
    }

    // ---- nonlinearities and normalization ----

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let value = softmax_last(self.value(x));
        let cols = *value.shape().last().unwrap();
        self.push(
            "softmax_last",
            value,
            vec![x.0],
            Some(Box::new(move |gy, _, y| {
                let mut g = vec![0.0; gy.numel()];
                for ((grow, yrow), out) in gy
                    .data()
                    .chunks(cols)
                    .zip(y.data().chunks(cols))
                    .zip(g.chunks_mut(cols))
                {
                    let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(grow).zip(yrow) {
                        *o = yv * (gv - s);
                    }
                }
                vec![Tensor::new(gy.shape().to_vec(), g)]
            })),
        )
    }

    pub fn layer_norm_last(&mut self, x: Var, eps: f64) -> Var {
        let value = layer_norm_last(self.value(x), eps);
        let cols = *value.shape().last().unwrap();
        self.push(
            "layer_norm_last",
            value,
            vec![x.0],
            Some(Box::new(move |gy, parents, y| {
                let x = parents[0];
                let n = cols as f64;
                let mut g = vec![0.0; gy.numel()];
                for (((grow, yrow), xrow), out) in gy
                    .data()
                    .chunks(cols)
                    .zip(y.data().chunks(cols))
                    .zip(x.data().chunks(cols))
                    .zip(g.chunks_mut(cols))
                {
                    let mean = xrow.iter().sum::<f64>() / n;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let gmean = grow.iter().sum::<f64>() / n;
                    let gydot = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, gv), yv) in out.iter_mut().zip(grow).zip(yrow) {
                        *o = rstd * (gv - gmean - yv * gydot);
                    }
                }
                vec![Tensor::new(gy.shape().to_vec(), g)]
            })),
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu_scalar(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data);
        self.push(
            "gelu",
            value,
            vec![x.0],
            Some(Box::new(|gy, parents, _| {
                let g = gy
                    .data()
                    .iter()
                    .zip(parents[0].data())
                    .map(|(g, &x)| g * gelu_grad_scalar(x))
                    .collect();
                vec![Tensor::new(gy.shape().to_vec(), g)]
            })),
        )
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - p)`.
    /// Identity when `train` is false.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, rng: &mut impl Rng) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout: p must be in [0, 1)");
        if !train || p == 0.0 {
            return x;
        }
        let tx = self.value(x);
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.gen_bool(p) { 0.0 } else { scale })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(tx.shape().to_vec(), data);
        self.push(
            "dropout",
            value,
            vec![x.0],
            Some(Box::new(move |gy, _, _| {
                let g = gy.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
                vec![Tensor::new(gy.shape().to_vec(), g)]
            })),
        )
    }

    // ---- gather / scatter ----

    /// Picks rows of a `[vocab, dim]` table; the gradient scatter-adds into
    /// the table, so repeated ids accumulate.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Var {
        let tt = self.value(table);
        assert_eq!(tt.rank(), 2, "embedding_lookup: table must be rank 2");
        let (vocab, dim) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            assert!(id < vocab, "embedding_lookup: id {id} out of range {vocab}");
            data.extend_from_slice(&tt.data()[id * dim..(id + 1) * dim]);
        }
        let ids: Vec<usize> = ids.to_vec();
        let value = Tensor::new(vec![ids.len(), dim], data);
        self.push(
            "embedding_lookup",
            value,
            vec![table.0],
            Some(Box::new(move |gy, _, _| {
                let mut g = Tensor::zeros(vec![vocab, dim]);
                for (r, &id) in ids.iter().enumerate() {
                    let src = &gy.data()[r * dim..(r + 1) * dim];
                    let dst = &mut g.data_mut()[id * dim..(id + 1) * dim];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![g]
            })),
        )
    }

    /// Same gather as [`Tape::embedding_lookup`] but for activations.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        self.embedding_lookup(x, rows)
    }

    /// Mean over the rows of `x: [rows, cols]` selected by `mask`.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 2, "masked_mean expects rank 2");
        let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
        assert_eq!(mask.len(), rows, "masked_mean: mask length");
        let count = mask.iter().filter(|m| **m).count();
        assert!(count > 0, "masked_mean: empty selection");
        let mut out = vec![0.0; cols];
        for (r, row) in tx.data().chunks(cols).enumerate() {
            if mask[r] {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for o in &mut out {
            *o /= count as f64;
        }
        let mask: Vec<bool> = mask.to_vec();
        self.push(
            "masked_mean",
            Tensor::new(vec![cols], out),
            vec![x.0],
            Some(Box::new(move |gy, _, _| {
                let mut g = Tensor::zeros(vec![rows, cols]);
                for (r, row) in g.data_mut().chunks_mut(cols).enumerate() {
                    if mask[r] {
                        for (o, v) in row.iter_mut().zip(gy.data()) {
                            *o = v / count as f64;
                        }
                    }
                }
                vec![g]
            })),
        )
    }

    // ---- shape surgery ----

    pub fn concat(&mut self, axis: usize, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rank(), tb.rank(), "concat: rank mismatch");
        assert!(axis < ta.rank(), "concat: axis out of range");
        for (d, (x, y)) in ta.shape().iter().zip(tb.shape()).enumerate() {
            assert!(d == axis || x == y, "concat: shape mismatch on axis {d}");
        }
        let outer: usize = ta.shape()[..axis].iter().product();
        let inner: usize = ta.shape()[axis + 1..].iter().product();
        let (la, lb) = (ta.shape()[axis], tb.shape()[axis]);
        let mut shape = ta.shape().to_vec();
        shape[axis] = la + lb;
        let mut data = Vec::with_capacity(outer * (la + lb) * inner);
        for o in 0..outer {
            data.extend_from_slice(&ta.data()[o * la * inner..(o + 1) * la * inner]);
            data.extend_from_slice(&tb.data()[o * lb * inner..(o + 1) * lb * inner]);
        }
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        self.push(
            "concat",
            Tensor::new(shape, data),
            vec![a.0, b.0],
            Some(Box::new(move |gy, _, _| {
                let mut ga = Vec::with_capacity(outer * la * inner);
                let mut gb = Vec::with_capacity(outer * lb * inner);
                let stride = (la + lb) * inner;
                for o in 0..outer {
                    let block = &gy.data()[o * stride..(o + 1) * stride];
                    ga.extend_from_slice(&block[..la * inner]);
                    gb.extend_from_slice(&block[la * inner..]);
                }
                vec![Tensor::new(sa.clone(), ga), Tensor::new(sb.clone(), gb)]
            })),
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        assert!(axis < tx.rank(), "slice: axis out of range");
        assert!(start + len <= tx.shape()[axis], "slice: out of bounds");
        let outer: usize = tx.shape()[..axis].iter().product();
        let inner: usize = tx.shape()[axis + 1..].iter().product();
        let alen = tx.shape()[axis];
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            data.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let xshape = tx.shape().to_vec();
        self.push(
            "slice",
            Tensor::new(shape, data),
            vec![x.0],
            Some(Box::new(move |gy, _, _| {
                let mut g = Tensor::zeros(xshape.clone());
                for o in 0..outer {
                    let base = o * alen * inner + start * inner;
                    g.data_mut()[base..base + len * inner]
                        .copy_from_slice(&gy.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![g]
            })),
        )
    }

    /// `[B, S, H*dh] -> [B*H, S, dh]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 3, "split_heads expects rank 3");
        let (b, s, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        assert_eq!(d % heads, 0, "split_heads: dim {d} not divisible by {heads}");
        let dh = d / heads;
        let value = Tensor::new(vec![b * heads, s, dh], split_heads_data(tx.data(), b, s, heads, dh));
        self.push(
            "split_heads",
            value,
            vec![x.0],
            Some(Box::new(move |gy, _, _| {
                vec![Tensor::new(
                    vec![b, s, heads * dh],
                    merge_heads_data(gy.data(), b, s, heads, dh),
                )]
            })),
        )
    }

    /// `[B*H, S, dh] -> [B, S, H*dh]`
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 3, "merge_heads expects rank 3");
        let (bh, s, dh) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        assert_eq!(bh % heads, 0, "merge_heads: batch {bh} not divisible by {heads}");
        let b = bh / heads;
        let value = Tensor::new(vec![b, s, heads * dh], merge_heads_data(tx.data(), b, s, heads, dh));
        self.push(
            "merge_heads",
            value,
            vec![x.0],
            Some(Box::new(move |gy, _, _| {
                vec![Tensor::new(
                    vec![b * heads, s, dh],
                    split_heads_data(gy.data(), b, s, heads, dh),
                )]
            })),
        )
    }

    // ---- reductions and losses ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let value = Tensor::scalar(tx.data().iter().sum());
        self.push(
            "sum_all",
            value,
            vec![x.0],
            Some(Box::new(move |gy, _, _| {
                let g = gy.item();
                vec![Tensor::new(shape.clone(), vec![g; shape.iter().product()])]
            })),
        )
    }

    /// Sum over rows of the softmax cross-entropy between `logits: [R, C]`
    /// and integer targets. Empty input yields zero loss.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Var {
        let tl = self.value(logits);
        assert_eq!(tl.rank(), 2, "cross_entropy_sum expects rank 2 logits");
        let (rows, cols) = (tl.shape()[0], tl.shape()[1]);
        assert_eq!(targets.len(), rows, "cross_entropy_sum: target count");
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for (r, (row, prow)) in tl.data().chunks(cols).zip(probs.chunks_mut(cols)).enumerate() {
            let t = targets[r];
            assert!(t < cols, "cross_entropy_sum: target {t} out of range {cols}");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - max).exp();
                sum += *p;
            }
            for p in prow.iter_mut() {
                *p /= sum;
            }
            loss += max + sum.ln() - row[t];
        }
        let targets: Vec<usize> = targets.to_vec();
        self.push(
            "cross_entropy_sum",
            Tensor::scalar(loss),
            vec![logits.0],
            Some(Box::new(move |gy, _, _| {
                let g = gy.item();
                let mut grad = probs.clone();
                for (r, row) in grad.chunks_mut(cols).enumerate() {
                    row[targets[r]] -= 1.0;
                    for v in row {
                        *v *= g;
                    }
                }
                vec![Tensor::new(vec![rows, cols], grad)]
            })),
        )
    }

    /// Sum over rows of the per-row mean squared error against a constant
    /// target of the same shape.
    pub fn mse_sum_row_mean(&mut self, pred: Var, target: &Tensor) -> Var {
        let tp = self.value(pred);
        assert_eq!(tp.shape(), target.shape(), "mse_sum_row_mean: shape mismatch");
        assert_eq!(tp.rank(), 2, "mse_sum_row_mean expects rank 2");
        let cols = tp.shape()[1];
        let loss: f64 = if cols == 0 {
            0.0
        } else {
            tp.data()
                .iter()
                .zip(target.data())
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / cols as f64
        };
        let target = target.clone();
        self.push(
            "mse_sum_row_mean",
            Tensor::scalar(loss),
            vec![pred.0],
            Some(Box::new(move |gy, parents, _| {
                let g = gy.item();
                let grad = parents[0]
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| g * 2.0 * (p - t) / cols as f64)
                    .collect();
                vec![Tensor::new(parents[0].shape().to_vec(), grad)]
            })),
        )
    }
}

fn split_heads_data(data: &[f64], b: usize, s: usize, heads: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for bi in 0..b {
        for si in 0..s {
            for h in 0..heads {
                let src = bi * s * heads * dh + si * heads * dh + h * dh;
                let dst = (bi * heads + h) * s * dh + si * dh;
                out[dst..dst + dh].copy_from_slice(&data[src..src + dh]);
            }
        }
    }
    out
}

fn merge_heads_data(data: &[f64], b: usize, s: usize, heads: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for bi in 0..b {
        for si in 0..s {
            for h in 0..heads {
                let src = (bi * heads + h) * s * dh + si * dh;
                let dst = bi * s * heads * dh + si * heads * dh + h * dh;
                out[dst..dst + dh].copy_from_slice(&data[src..src + dh]);
            }
        }
    }
    out
}
