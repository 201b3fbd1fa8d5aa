//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A [`Tape`] records every operation in topological order; [`Tape::backward`]
//! walks the records in reverse, accumulating gradients. Nodes are addressed
//! by opaque [`Var`] handles. Constant inputs (masks, data batches) are marked
//! at creation so backward skips whole subtrees that cannot reach a parameter.
//!
//! Gradient buffers for intermediate nodes are dropped as soon as their
//! producers have consumed them; only leaf gradients survive the pass.

use std::rc::Rc;

use super::{matmul_nn, matmul_nt, matmul_tn, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    /// `a + b` where the shape of `b` is a suffix of the shape of `a`.
    AddSuffix(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    MatmulNN(Var, Var),
    MatmulNT(Var, Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    GatherFlat {
        input: Var,
        idx: Rc<Vec<usize>>,
    },
    Embedding {
        table: Var,
        ids: Rc<Vec<usize>>,
    },
    SoftmaxLast(Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Gelu(Var),
    Tanh(Var),
    CrossEntropyMean {
        logits: Var,
        targets: Rc<Vec<usize>>,
    },
    MeanSqDiff(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    /// Forward value was supplied externally; gradient passes through to the
    /// source unchanged.
    StraightThrough(Var),
    StopGrad,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`]. Only leaves retain buffers.
pub struct Grads<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots[v.0].as_ref()
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input; gradients are retained for it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input (data, masks, precomputed features).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
            let mut o = ta.clone();
            o.add_assign(tb);
            o
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    /// `a + b` broadcasting `b` over the leading axes of `a` (bias add).
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            let bn = tb.numel();
            assert!(
                ta.numel() % bn == 0 && ta.shape().ends_with(tb.shape()),
                "add_suffix: {:?} does not end with {:?}",
                ta.shape(),
                tb.shape()
            );
            let mut data = ta.data().to_vec();
            for chunk in data.chunks_mut(bn) {
                for (x, &y) in chunk.iter_mut().zip(tb.data()) {
                    *x = *x + y;
                }
            }
            Tensor::new(ta.shape(), data)
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::AddSuffix(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| x - y)
                .collect();
            Tensor::new(ta.shape(), data)
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| x * y)
                .collect();
            Tensor::new(ta.shape(), data)
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        let needs = self.needs(a);
        self.push(out, Op::Neg(a), needs)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let sv = T::from_f64(s);
        let out = self.value(a).map(|x| x * sv);
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, s), needs)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_nn(self.value(a), self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MatmulNN(a, b), needs)
    }

    /// `[m,k] x [n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_nt(self.value(a), self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MatmulNT(a, b), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        let needs = self.needs(a);
        self.push(out, Op::Reshape(a), needs)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty());
        let out = {
            let first = self.value(inputs[0]).shape().to_vec();
            assert!(axis < first.len(), "concat axis out of range");
            let inner: usize = first[axis + 1..].iter().product();
            let outer: usize = first[..axis].iter().product();
            let mut axis_total = 0;
            for &v in inputs {
                let s = self.value(v).shape();
                assert_eq!(s.len(), first.len(), "concat rank mismatch");
                for (d, (&x, &y)) in s.iter().zip(&first).enumerate() {
                    assert!(d == axis || x == y, "concat shape mismatch on axis {d}");
                }
                axis_total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = axis_total;
            let mut data = vec![T::zero(); outer * axis_total * inner];
            let out_stride = axis_total * inner;
            let mut offset = 0;
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                for o in 0..outer {
                    let src = &t.data()[o * len..(o + 1) * len];
                    data[o * out_stride + offset..o * out_stride + offset + len]
                        .copy_from_slice(src);
                }
                offset += len;
            }
            Tensor::new(&shape, data)
        };
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(out, Op::Concat(inputs.to_vec(), axis), needs)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let out = {
            let t = self.value(a);
            let s = t.shape();
            assert!(axis < s.len(), "slice axis out of range");
            assert!(start + len <= s[axis], "slice out of bounds");
            let inner: usize = s[axis + 1..].iter().product();
            let outer: usize = s[..axis].iter().product();
            let mut shape = s.to_vec();
            shape[axis] = len;
            let mut data = vec![T::zero(); outer * len * inner];
            let in_stride = s[axis] * inner;
            for o in 0..outer {
                let src = &t.data()[o * in_stride + start * inner..][..len * inner];
                data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
            }
            Tensor::new(&shape, data)
        };
        let needs = self.needs(a);
        self.push(out, Op::Slice { input: a, axis, start }, needs)
    }

    /// `out.flat[i] = input.flat[idx[i]]`; backward scatter-adds. Used for
    /// patch extraction, transposition-by-index, and voxel regrouping.
    pub fn gather_flat(&mut self, a: Var, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Var {
        let out = {
            let t = self.value(a);
            assert_eq!(
                idx.len(),
                out_shape.iter().product::<usize>(),
                "gather index count does not match output shape"
            );
            let src = t.data();
            let data = idx.iter().map(|&i| src[i]).collect();
            Tensor::new(out_shape, data)
        };
        let needs = self.needs(a);
        self.push(out, Op::GatherFlat { input: a, idx }, needs)
    }

    /// Row lookup into a `[K, D]` table, producing `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let ids = Rc::new(ids.to_vec());
        let out = {
            let t = self.value(table);
            assert_eq!(t.shape().len(), 2, "embedding table must be rank 2");
            let (k, d) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids.iter() {
                assert!(id < k, "embedding id {id} out of range {k}");
                data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
            }
            Tensor::new(&[ids.len(), d], data)
        };
        let needs = self.needs(table);
        self.push(out, Op::Embedding { table, ids }, needs)
    }

    /// Softmax over the last axis. `-inf` entries get exactly zero weight.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let out = {
            let t = self.value(a);
            let n = *t.shape().last().expect("softmax on rank-0 tensor");
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(n) {
                let mut mx = T::neg_infinity();
                for &x in row.iter() {
                    if x > mx {
                        mx = x;
                    }
                }
                let mut sum = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    sum = sum + *x;
                }
                for x in row.iter_mut() {
                    *x = *x / sum;
                }
            }
            Tensor::new(t.shape(), data)
        };
        let needs = self.needs(a);
        self.push(out, Op::SoftmaxLast(a), needs)
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let out = {
            let (t, g, b) = (self.value(input), self.value(gamma), self.value(beta));
            let n = *t.shape().last().expect("layer_norm on rank-0 tensor");
            assert_eq!(g.shape(), [n], "gamma shape");
            assert_eq!(b.shape(), [n], "beta shape");
            let epsv = T::from_f64(eps);
            let inv_n = T::from_f64(1.0 / n as f64);
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(n) {
                let mut mu = T::zero();
                for &x in row.iter() {
                    mu = mu + x;
                }
                mu = mu * inv_n;
                let mut var = T::zero();
                for &x in row.iter() {
                    let d = x - mu;
                    var = var + d * d;
                }
                var = var * inv_n;
                let inv_std = (var + epsv).sqrt().recip();
                for (x, (&gg, &bb)) in row.iter_mut().zip(g.data().iter().zip(b.data())) {
                    *x = (*x - mu) * inv_std * gg + bb;
                }
            }
            Tensor::new(t.shape(), data)
        };
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            },
            needs,
        )
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_fwd);
        let needs = self.needs(a);
        self.push(out, Op::Gelu(a), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let needs = self.needs(a);
        self.push(out, Op::Tanh(a), needs)
    }

    /// Mean-over-rows cross entropy between `[n, K]` logits and class ids.
    /// Stable log-sum-exp; returns a scalar.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Var {
        let targets = Rc::new(targets.to_vec());
        let out = {
            let t = self.value(logits);
            assert_eq!(t.shape().len(), 2, "logits must be rank 2");
            let (n, k) = (t.shape()[0], t.shape()[1]);
            assert_eq!(n, targets.len(), "one target per row");
            let mut total = T::zero();
            for (row, &tgt) in t.data().chunks(k).zip(targets.iter()) {
                assert!(tgt < k, "target {tgt} out of range {k}");
                let mut mx = T::neg_infinity();
                for &x in row {
                    if x > mx {
                        mx = x;
                    }
                }
                let mut sum = T::zero();
                for &x in row {
                    sum = sum + (x - mx).exp();
                }
                total = total + mx + sum.ln() - row[tgt];
            }
            Tensor::scalar(total * T::from_f64(1.0 / n as f64))
        };
        let needs = self.needs(logits);
        self.push(out, Op::CrossEntropyMean { logits, targets }, needs)
    }

    /// `mean((a - b)^2)` as a scalar.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            assert_eq!(ta.shape(), tb.shape(), "mean_sq_diff shape mismatch");
            let mut total = T::zero();
            for (&x, &y) in ta.data().iter().zip(tb.data()) {
                let d = x - y;
                total = total + d * d;
            }
            Tensor::scalar(total * T::from_f64(1.0 / ta.numel() as f64))
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MeanSqDiff(a, b), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = {
            let mut total = T::zero();
            for &x in self.value(a).data() {
                total = total + x;
            }
            Tensor::scalar(total)
        };
        let needs = self.needs(a);
        self.push(out, Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let out = {
            let t = self.value(a);
            let mut total = T::zero();
            for &x in t.data() {
                total = total + x;
            }
            Tensor::scalar(total * T::from_f64(1.0 / t.numel() as f64))
        };
        let needs = self.needs(a);
        self.push(out, Op::MeanAll(a), needs)
    }

    /// Straight-through estimator: forward takes the externally supplied
    /// `value`, backward copies the gradient onto `src` unchanged.
    pub fn straight_through(&mut self, value: Tensor<T>, src: Var) -> Var {
        assert_eq!(
            value.shape(),
            self.value(src).shape(),
            "straight_through shape mismatch"
        );
        let needs = self.needs(src);
        self.push(value, Op::StraightThrough(src), needs)
    }

    /// Forward copy with gradient flow severed.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGrad, false)
    }

    /// Reverse pass from a scalar (or any) node seeded with ones.
    pub fn backward(&mut self, loss: Var) -> Grads<T> {
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Tensor::full(self.nodes[loss.0].value.shape(), T::one());
        slots[loss.0] = Some(seed);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                slots[i] = None;
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            self.dispatch(i, &g, &mut slots);
            if is_leaf {
                slots[i] = Some(g);
            }
        }
        Grads { slots }
    }

    fn accum(&self, slots: &mut [Option<Tensor<T>>], v: Var, contrib: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut slots[v.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn dispatch(&self, i: usize, g: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                self.accum(slots, *a, g.clone());
                self.accum(slots, *b, g.clone());
            }
            Op::AddSuffix(a, b) => {
                self.accum(slots, *a, g.clone());
                if self.needs(*b) {
                    let bn = self.value(*b).numel();
                    let mut db = Tensor::zeros(self.value(*b).shape());
                    for chunk in g.data().chunks(bn) {
                        for (d, &x) in db.data_mut().iter_mut().zip(chunk) {
                            *d = *d + x;
                        }
                    }
                    self.accum(slots, *b, db);
                }
            }
            Op::Sub(a, b) => {
                self.accum(slots, *a, g.clone());
                self.accum(slots, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let tb = self.value(*b);
                    let data = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(slots, *a, Tensor::new(g.shape(), data));
                }
                if self.needs(*b) {
                    let ta = self.value(*a);
                    let data = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(slots, *b, Tensor::new(g.shape(), data));
                }
            }
            Op::Neg(a) => self.accum(slots, *a, g.map(|x| -x)),
            Op::Scale(a, s) => {
                let sv = T::from_f64(*s);
                self.accum(slots, *a, g.map(|x| x * sv));
            }
            Op::MatmulNN(a, b) => {
                if self.needs(*a) {
                    self.accum(slots, *a, matmul_nt(g, self.value(*b)));
                }
                if self.needs(*b) {
                    self.accum(slots, *b, matmul_tn(self.value(*a), g));
                }
            }
            Op::MatmulNT(a, b) => {
                if self.needs(*a) {
                    self.accum(slots, *a, matmul_nn(g, self.value(*b)));
                }
                if self.needs(*b) {
                    self.accum(slots, *b, matmul_tn(g, self.value(*a)));
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accum(slots, *a, g.clone().reshaped(&shape));
            }
            Op::Concat(inputs, axis) => {
                let axis = *axis;
                let out_shape = self.nodes[i].value.shape();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..axis].iter().product();
                let out_stride = out_shape[axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let s = self.value(v).shape().to_vec();
                    let len = s[axis] * inner;
                    if self.needs(v) {
                        let mut dv = vec![T::zero(); outer * len];
                        for o in 0..outer {
                            dv[o * len..(o + 1) * len].copy_from_slice(
                                &g.data()[o * out_stride + offset..o * out_stride + offset + len],
                            );
                        }
                        self.accum(slots, v, Tensor::new(&s, dv));
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = self.value(*input).shape().to_vec();
                let inner: usize = s[*axis + 1..].iter().product();
                let outer: usize = s[..*axis].iter().product();
                let in_stride = s[*axis] * inner;
                let len = self.nodes[i].value.shape()[*axis] * inner;
                let mut da = Tensor::zeros(&s);
                for o in 0..outer {
                    let dst = &mut da.data_mut()[o * in_stride + start * inner..][..len];
                    for (d, &x) in dst.iter_mut().zip(&g.data()[o * len..(o + 1) * len]) {
                        *d = *d + x;
                    }
                }
                self.accum(slots, *input, da);
            }
            Op::GatherFlat { input, idx } => {
                let mut da = Tensor::zeros(self.value(*input).shape());
                let dd = da.data_mut();
                for (&src_i, &x) in idx.iter().zip(g.data()) {
                    dd[src_i] = dd[src_i] + x;
                }
                self.accum(slots, *input, da);
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                let mut dt = Tensor::zeros(self.value(*table).shape());
                let dd = dt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    let grow = &g.data()[r * d..(r + 1) * d];
                    for (slot, &x) in dd[id * d..(id + 1) * d].iter_mut().zip(grow) {
                        *slot = *slot + x;
                    }
                }
                self.accum(slots, *table, dt);
            }
            Op::SoftmaxLast(a) => {
                let y = &self.nodes[i].value;
                let n = *y.shape().last().unwrap();
                let mut dx = vec![T::zero(); y.numel()];
                for ((dx_row, y_row), g_row) in dx
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let mut dot = T::zero();
                    for (&gy, &yy) in g_row.iter().zip(y_row) {
                        dot = dot + gy * yy;
                    }
                    for ((d, &gy), &yy) in dx_row.iter_mut().zip(g_row).zip(y_row) {
                        *d = (gy - dot) * yy;
                    }
                }
                self.accum(slots, *a, Tensor::new(y.shape(), dx));
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            } => {
                let t = self.value(*input);
                let gam = self.value(*gamma);
                let n = *t.shape().last().unwrap();
                let inv_n = T::from_f64(1.0 / n as f64);
                let epsv = T::from_f64(*eps);
                let mut dx = vec![T::zero(); t.numel()];
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                for (row_i, (x_row, g_row)) in
                    t.data().chunks(n).zip(g.data().chunks(n)).enumerate()
                {
                    let mut mu = T::zero();
                    for &x in x_row {
                        mu = mu + x;
                    }
                    mu = mu * inv_n;
                    let mut var = T::zero();
                    for &x in x_row {
                        let d = x - mu;
                        var = var + d * d;
                    }
                    var = var * inv_n;
                    let inv_std = (var + epsv).sqrt().recip();

                    // xhat and the two row means the gradient needs.
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    let mut xhat = vec![T::zero(); n];
                    let mut dxhat = vec![T::zero(); n];
                    for j in 0..n {
                        xhat[j] = (x_row[j] - mu) * inv_std;
                        dxhat[j] = g_row[j] * gam.data()[j];
                        mean_dxhat = mean_dxhat + dxhat[j];
                        mean_dxhat_xhat = mean_dxhat_xhat + dxhat[j] * xhat[j];
                        dgamma[j] = dgamma[j] + g_row[j] * xhat[j];
                        dbeta[j] = dbeta[j] + g_row[j];
                    }
                    mean_dxhat = mean_dxhat * inv_n;
                    mean_dxhat_xhat = mean_dxhat_xhat * inv_n;
                    let dx_row = &mut dx[row_i * n..(row_i + 1) * n];
                    for j in 0..n {
                        dx_row[j] = (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) * inv_std;
                    }
                }
                self.accum(slots, *input, Tensor::new(t.shape(), dx));
                self.accum(slots, *gamma, Tensor::new(&[n], dgamma));
                self.accum(slots, *beta, Tensor::new(&[n], dbeta));
            }
            Op::Gelu(a) => {
                let t = self.value(*a);
                let data = t
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| gy * gelu_bwd(x))
                    .collect();
                self.accum(slots, *a, Tensor::new(t.shape(), data));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yy, &gy)| gy * (T::one() - yy * yy))
                    .collect();
                self.accum(slots, *a, Tensor::new(y.shape(), data));
            }
            Op::CrossEntropyMean { logits, targets } => {
                let t = self.value(*logits);
                let (n, k) = (t.shape()[0], t.shape()[1]);
                let gscale = g.item() * T::from_f64(1.0 / n as f64);
                let mut dl = vec![T::zero(); n * k];
                for ((dl_row, row), &tgt) in
                    dl.chunks_mut(k).zip(t.data().chunks(k)).zip(targets.iter())
                {
                    let mut mx = T::neg_infinity();
                    for &x in row {
                        if x > mx {
                            mx = x;
                        }
                    }
                    let mut sum = T::zero();
                    for &x in row {
                        sum = sum + (x - mx).exp();
                    }
                    for (j, (d, &x)) in dl_row.iter_mut().zip(row).enumerate() {
                        let p = (x - mx).exp() / sum;
                        let ind = if j == tgt { T::one() } else { T::zero() };
                        *d = (p - ind) * gscale;
                    }
                }
                self.accum(slots, *logits, Tensor::new(&[n, k], dl));
            }
            Op::MeanSqDiff(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale = g.item() * T::from_f64(2.0 / ta.numel() as f64);
                if self.needs(*a) {
                    let data = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| (x - y) * scale)
                        .collect();
                    self.accum(slots, *a, Tensor::new(ta.shape(), data));
                }
                if self.needs(*b) {
                    let data = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| (y - x) * scale)
                        .collect();
                    self.accum(slots, *b, Tensor::new(tb.shape(), data));
                }
            }
            Op::SumAll(a) => {
                let gv = g.item();
                self.accum(slots, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::MeanAll(a) => {
                let t = self.value(*a);
                let gv = g.item() * T::from_f64(1.0 / t.numel() as f64);
                self.accum(slots, *a, Tensor::full(t.shape(), gv));
            }
            Op::StraightThrough(src) => {
                self.accum(slots, *src, g.clone());
            }
        }
    }
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c0 = T::from_f64(GELU_C0);
    let c1 = T::from_f64(GELU_C1);
    let half = T::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c0 = T::from_f64(GELU_C0);
    let c1 = T::from_f64(GELU_C1);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let du = c0 * (T::one() + three * c1 * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_backward() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::new(&[2], vec![10.0, 20.0]));
        let c = tape.add(a, b);
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn matmul_backward_matches_manual() {
        // loss = sum(A @ B); dA = ones @ B^T, dB = A^T @ ones.
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b);
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_masked_entries_get_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(
            &[2, 3],
            vec![0.5, 1.5, f64::NEG_INFINITY, 2.0, f64::NEG_INFINITY, f64::NEG_INFINITY],
        ));
        let y = tape.softmax_last(x);
        let v = tape.value(y).data().to_vec();
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[3], 1.0);
        assert_eq!(v[4], 0.0);
        assert_eq!(v[5], 0.0);
    }

    #[test]
    fn cross_entropy_matches_manual_value() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.leaf(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]));
        let loss = tape.cross_entropy_mean(logits, &[2]);
        let expect = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::new(&[2], vec![3.0, 4.0]));
        let s = tape.stop_grad(a);
        let b = tape.mul(s, s);
        let loss = tape.sum_all(b);
        let grads = tape.backward(loss);
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn straight_through_passes_gradient_to_source() {
        let mut tape: Tape<f64> = Tape::new();
        let z_e = tape.leaf(Tensor::new(&[2], vec![0.3, 0.7]));
        let z_q = tape.straight_through(Tensor::new(&[2], vec![0.0, 1.0]), z_e);
        let ones = tape.constant(Tensor::new(&[2], vec![1.0, 1.0]));
        let loss = tape.mean_sq_diff(z_q, ones);
        let grads = tape.backward(loss);
        // d/dz_q of mean((z_q - 1)^2) = (z_q - 1), and z_q forward is [0, 1].
        let g = grads.get(z_e).unwrap().data().to_vec();
        assert!((g[0] - -1.0).abs() < 1e-12);
        assert!((g[1] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn gather_backward_scatter_adds_duplicates() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]));
        let idx = Rc::new(vec![0usize, 0, 2]);
        let g = tape.gather_flat(a, idx, &[3]);
        let loss = tape.sum_all(g);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_slice_roundtrip_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(Tensor::new(&[2, 1], vec![5.0, 6.0]));
        let c = tape.concat(&[a, b], 1);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let sl = tape.slice(c, 1, 2, 1);
        let loss = tape.sum_all(sl);
        let grads = tape.backward(loss);
        assert!(grads.get(a).unwrap().data().iter().all(|&x| x == 0.0));
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }
}
