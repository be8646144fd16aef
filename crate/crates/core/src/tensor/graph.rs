use std::sync::Arc;

use super::{gemm, Layout, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias {
        x: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    MixRows {
        mix: Var,
        x: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Silu(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Var, Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<Option<usize>>,
        row_weight: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    AttentionPool {
        x: Var,
        scores: Var,
        group: usize,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of differentiable operations.
///
/// A graph is confined to one thread. Parameters enter as leaves with
/// `requires_grad`; their gradients accumulate across [`Graph::backward`]
/// calls until [`Graph::zero_grad`].
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// While disabled, new nodes record no parents and never require grad.
    pub fn set_grad_enabled(&mut self, enabled: bool) {
        self.grad_enabled = enabled;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Drops every node created after `len`. Vars pointing past `len` become
    /// invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    pub fn param(&mut self, value: impl Into<Arc<Tensor<T>>>) -> Var {
        let value = value.into();
        let requires = self.grad_enabled;
        self.push_leaf(value, requires)
    }

    pub fn constant(&mut self, value: impl Into<Arc<Tensor<T>>>) -> Var {
        self.push_leaf(value.into(), false)
    }

    fn push_leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, rec: Op<T>) -> Result<Var> {
        value.check_finite(op)?;
        let requires_grad = self.grad_enabled && self.parents_require_grad(&rec);
        let op = if requires_grad { rec } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents_require_grad(&self, op: &Op<T>) -> bool {
        let r = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => r(a) || r(b),
            Op::ConcatCols(a, b) => r(a) || r(b),
            Op::Scale(a, _) | Op::Silu(a) | Op::Transpose(a) | Op::Sum(a) | Op::Mean(a) => r(a),
            Op::AddBias { x, bias } => r(x) || r(bias),
            Op::MixRows { mix, x } => r(mix) || r(x),
            Op::Gather { table, .. } => r(table),
            Op::RmsNorm { x, gain, .. } => r(x) || r(gain),
            Op::CrossEntropy { logits, .. } | Op::BceWithLogits { logits, .. } => r(logits),
            Op::AttentionPool { x, scores, .. } => r(x) || r(scores),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|&x| x * c).collect(),
        };
        self.push("scale", out, Op::Scale(a, c))
    }

    /// Adds a `[C]` bias to every row of an `[R,C]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.numel() != c {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for {:?}", tb.shape(), tx.shape()),
            ));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += *b;
            }
        }
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        self.push("add_bias", out, Op::AddBias { x, bias })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            Layout::Plain,
            tb.data(),
            Layout::Plain,
            T::zero(),
            &mut data,
        );
        self.push(
            "matmul",
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::MatMul(a, b),
        )
    }

    /// Left-multiplies every consecutive block of `L` rows of `x` by the
    /// `[L,L]` matrix `mix` (mixing across positions within each sample).
    pub fn mix_rows(&mut self, mix: Var, x: Var) -> Result<Var> {
        let (tm, tx) = (self.value(mix), self.value(x));
        let l = tm.rows();
        if tm.shape() != [l, l] || tx.shape().len() != 2 || tx.rows() % l != 0 {
            return Err(Error::shape(
                "mix_rows",
                format!("{:?} over {:?}", tm.shape(), tx.shape()),
            ));
        }
        let h = tx.cols();
        let mut data = vec![T::zero(); tx.numel()];
        for (xb, ob) in tx.data().chunks(l * h).zip(data.chunks_mut(l * h)) {
            gemm(
                l,
                l,
                h,
                tm.data(),
                Layout::Plain,
                xb,
                Layout::Plain,
                T::zero(),
                ob,
            );
        }
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        self.push("mix_rows", out, Op::MixRows { mix, x })
    }

    /// Row gather: `out[i] = table[ids[i]]` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, h) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(Error::Contract(format!("gather id {id} out of range {v}")));
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor {
            shape: vec![ids.len(), h],
            data,
        };
        self.push(
            "gather_rows",
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// `x / sqrt(mean(x²) + eps) * gain`, per row.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let c = tx.cols();
        if tg.numel() != c {
            return Err(Error::shape(
                "rms_norm",
                format!("gain {:?} for {:?}", tg.shape(), tx.shape()),
            ));
        }
        let eps = T::of(eps);
        let inv_c = T::one() / T::of(c as f64);
        let mut inv_rms = Vec::with_capacity(tx.rows());
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(c) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_c;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().zip(tg.data()).map(|(&v, &g)| v * inv * g));
        }
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        self.push("rms_norm", out, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Sigmoid-weighted linear unit, `x·sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data: tx.data().iter().map(|&v| v * sigmoid(v)).collect(),
        };
        self.push("silu", out, Op::Silu(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", tx.shape())));
        }
        let out = transpose_matrix(tx);
        self.push("transpose", out, Op::Transpose(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = T::of(tx.numel() as f64);
        let s = tx.data().iter().copied().sum::<T>() / n;
        self.push("mean", Tensor::scalar(s), Op::Mean(x))
    }

    /// Concatenates two matrices along the feature (column) axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() || ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} | {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (ca, cb) = (ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor {
            shape: vec![ta.rows(), ca + cb],
            data,
        };
        self.push("concat_cols", out, Op::ConcatCols(a, b))
    }

    /// Same value, no gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value_arc(x);
        self.constant(v)
    }

    /// Mean token cross entropy.
    ///
    /// Rows are split into consecutive groups of `group` rows (one group per
    /// sample). Each group contributes the mean of `-log softmax(row)[target]`
    /// over its non-ignored rows, and the result is the mean over groups.
    /// Groups whose rows are all ignored contribute zero.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_id: usize,
        group: usize,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (r, v) = (tl.rows(), tl.cols());
        if targets.len() != r || r == 0 || group == 0 || r % group != 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} targets, {r} rows, group {group}", targets.len()),
            ));
        }
        let n_groups = r / group;
        let mut tgt = Vec::with_capacity(r);
        for &t in targets {
            if t == ignore_id {
                tgt.push(None);
            } else if t < v {
                tgt.push(Some(t));
            } else {
                return Err(Error::Contract(format!(
                    "cross entropy target {t} outside [0,{v})"
                )));
            }
        }
        let mut row_weight = vec![T::zero(); r];
        for g in 0..n_groups {
            let rows = g * group..(g + 1) * group;
            let count = tgt[rows.clone()].iter().filter(|t| t.is_some()).count();
            if count > 0 {
                let w = T::one() / T::of((count * n_groups) as f64);
                for i in rows {
                    if tgt[i].is_some() {
                        row_weight[i] = w;
                    }
                }
            }
        }
        let mut probs = Vec::with_capacity(r * v);
        let mut loss = T::zero();
        for (i, row) in tl.data().chunks(v).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp = row.iter().map(|&x| (x - max).exp()).sum::<T>();
            let lse = max + sum_exp.ln();
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
            if let Some(t) = tgt[i] {
                loss += row_weight[i] * (lse - row[t]);
            }
        }
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: tgt,
                row_weight,
            },
        )
    }

    /// Mean of `softplus(l) - t·l` over all logits; targets must be 0 or 1.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.numel() != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits, {} targets", tl.numel(), targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Contract(format!("bce target {bad} is not binary")));
        }
        let targets: Vec<T> = targets.iter().map(|&t| T::of(t)).collect();
        let n = T::of(targets.len() as f64);
        let loss = tl
            .data()
            .iter()
            .zip(&targets)
            .map(|(&l, &t)| softplus(l) - t * l)
            .sum::<T>()
            / n;
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, targets },
        )
    }

    /// Softmax-weighted pooling of each group of `group` rows of `x`, with
    /// weights from the matching `[rows,1]` scores. Returns `[rows/group, C]`.
    pub fn attention_pool(&mut self, x: Var, scores: Var, group: usize) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(scores));
        let (r, c) = (tx.rows(), tx.cols());
        if ts.numel() != r || group == 0 || r % group != 0 {
            return Err(Error::shape(
                "attention_pool",
                format!("x {:?}, scores {:?}, group {group}", tx.shape(), ts.shape()),
            ));
        }
        let mut weights = Vec::with_capacity(r);
        let mut data = vec![T::zero(); (r / group) * c];
        for (g, (sc, out)) in ts.data().chunks(group).zip(data.chunks_mut(c)).enumerate() {
            let max = sc.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = sc.iter().map(|&s| (s - max).exp()).collect();
            let total = exps.iter().copied().sum::<T>();
            for (l, e) in exps.into_iter().enumerate() {
                let w = e / total;
                weights.push(w);
                for (o, &xv) in out.iter_mut().zip(tx.row(g * group + l)) {
                    *o += w * xv;
                }
            }
        }
        let out = Tensor {
            shape: vec![r / group, c],
            data,
        };
        self.push(
            "attention_pool",
            out,
            Op::AttentionPool {
                x,
                scores,
                group,
                weights,
            },
        )
    }

    /// Reverse pass from a scalar root. Parameter gradients are added to the
    /// stored accumulators; call [`Graph::zero_grad`] first for a fresh pass.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        local[root.0] = Some(Tensor {
            shape: self.value(root).shape().to_vec(),
            data: vec![T::one()],
        });
        for i in (0..=root.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                accumulate(&mut self.grads[i], g);
                continue;
            }
            self.backprop_node(i, &g, &mut local);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, local: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let send = |v: Var, t: Tensor<T>, local: &mut [Option<Tensor<T>>]| {
            accumulate(&mut local[v.0], t);
        };
        let like = |v: Var, data: Vec<T>| Tensor {
            shape: self.value(v).shape().to_vec(),
            data,
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(a) {
                    send(*a, g.clone(), local);
                }
                if needs(b) {
                    send(*b, g.clone(), local);
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    send(*a, g.clone(), local);
                }
                if needs(b) {
                    send(*b, like(*b, g.data().iter().map(|&x| -x).collect()), local);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    send(*a, like(*a, d), local);
                }
                if needs(b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    send(*b, like(*b, d), local);
                }
            }
            Op::Scale(a, c) => {
                send(
                    *a,
                    like(*a, g.data().iter().map(|&x| x * *c).collect()),
                    local,
                );
            }
            Op::AddBias { x, bias } => {
                if needs(x) {
                    send(*x, g.clone(), local);
                }
                if needs(bias) {
                    let c = g.cols();
                    let mut d = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (acc, &v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    send(*bias, like(*bias, d), local);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if needs(a) {
                    let mut d = vec![T::zero(); m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        Layout::Plain,
                        tb.data(),
                        Layout::Transposed,
                        T::zero(),
                        &mut d,
                    );
                    send(*a, like(*a, d), local);
                }
                if needs(b) {
                    let mut d = vec![T::zero(); k * n];
                    gemm(
                        k,
                        m,
                        n,
                        ta.data(),
                        Layout::Transposed,
                        g.data(),
                        Layout::Plain,
                        T::zero(),
                        &mut d,
                    );
                    send(*b, like(*b, d), local);
                }
            }
            Op::MixRows { mix, x } => {
                let (tm, tx) = (self.value(*mix), self.value(*x));
                let l = tm.rows();
                let h = tx.cols();
                if needs(mix) {
                    let mut d = vec![T::zero(); l * l];
                    for (gb, xb) in g.data().chunks(l * h).zip(tx.data().chunks(l * h)) {
                        gemm(
                            l,
                            h,
                            l,
                            gb,
                            Layout::Plain,
                            xb,
                            Layout::Transposed,
                            T::one(),
                            &mut d,
                        );
                    }
                    send(*mix, like(*mix, d), local);
                }
                if needs(x) {
                    let mut d = vec![T::zero(); tx.numel()];
                    for (gb, db) in g.data().chunks(l * h).zip(d.chunks_mut(l * h)) {
                        gemm(
                            l,
                            l,
                            h,
                            tm.data(),
                            Layout::Transposed,
                            gb,
                            Layout::Plain,
                            T::zero(),
                            db,
                        );
                    }
                    send(*x, like(*x, d), local);
                }
            }
            Op::Gather { table, ids } => {
                let tt = self.value(*table);
                let h = tt.cols();
                let mut d = vec![T::zero(); tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, &v) in d[id * h..(id + 1) * h].iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                send(*table, like(*table, d), local);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let c = tx.cols();
                let inv_c = T::one() / T::of(c as f64);
                if needs(x) {
                    let mut d = Vec::with_capacity(tx.numel());
                    for ((row, grow), &inv) in
                        tx.data().chunks(c).zip(g.data().chunks(c)).zip(inv_rms)
                    {
                        let dot = row
                            .iter()
                            .zip(grow)
                            .zip(tg.data())
                            .map(|((&xv, &gv), &gn)| xv * gv * gn)
                            .sum::<T>();
                        let k = inv * inv * inv * dot * inv_c;
                        d.extend(
                            row.iter()
                                .zip(grow)
                                .zip(tg.data())
                                .map(|((&xv, &gv), &gn)| inv * gn * gv - k * xv),
                        );
                    }
                    send(*x, like(*x, d), local);
                }
                if needs(gain) {
                    let mut d = vec![T::zero(); c];
                    for ((row, grow), &inv) in
                        tx.data().chunks(c).zip(g.data().chunks(c)).zip(inv_rms)
                    {
                        for ((acc, &xv), &gv) in d.iter_mut().zip(row).zip(grow) {
                            *acc += gv * xv * inv;
                        }
                    }
                    send(*gain, like(*gain, d), local);
                }
            }
            Op::Silu(a) => {
                let ta = self.value(*a);
                let d = ta
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| {
                        let s = sigmoid(x);
                        gv * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                send(*a, like(*a, d), local);
            }
            Op::Transpose(a) => {
                send(*a, transpose_matrix(g), local);
            }
            Op::Sum(a) => {
                let gv = g.item();
                send(*a, Tensor::full(self.value(*a).shape().to_vec(), gv), local);
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let gv = g.item() / T::of(ta.numel() as f64);
                send(*a, Tensor::full(ta.shape().to_vec(), gv), local);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let rows = g.rows();
                if needs(a) {
                    let mut d = Vec::with_capacity(rows * ca);
                    for r in 0..rows {
                        d.extend_from_slice(&g.row(r)[..ca]);
                    }
                    send(*a, like(*a, d), local);
                }
                if needs(b) {
                    let mut d = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        d.extend_from_slice(&g.row(r)[ca..]);
                    }
                    send(*b, like(*b, d), local);
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                row_weight,
            } => {
                let gv = g.item();
                let v = self.value(*logits).cols();
                let mut d = vec![T::zero(); probs.len()];
                for (r, (drow, prow)) in d.chunks_mut(v).zip(probs.chunks(v)).enumerate() {
                    if let Some(t) = targets[r] {
                        let w = row_weight[r] * gv;
                        for (dv, &p) in drow.iter_mut().zip(prow) {
                            *dv = w * p;
                        }
                        drow[t] -= w;
                    }
                }
                send(*logits, like(*logits, d), local);
            }
            Op::BceWithLogits { logits, targets } => {
                let scale = g.item() / T::of(targets.len() as f64);
                let d = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&l, &t)| scale * (sigmoid(l) - t))
                    .collect();
                send(*logits, like(*logits, d), local);
            }
            Op::AttentionPool {
                x,
                scores,
                group,
                weights,
            } => {
                let tx = self.value(*x);
                let c = tx.cols();
                if needs(x) {
                    let mut d = Vec::with_capacity(tx.numel());
                    for (r, &w) in weights.iter().enumerate() {
                        d.extend(g.row(r / group).iter().map(|&gv| w * gv));
                    }
                    send(*x, like(*x, d), local);
                }
                if needs(scores) {
                    let mut d = vec![T::zero(); weights.len()];
                    for (gi, gout) in g.data().chunks(c).enumerate() {
                        let rows = gi * group..(gi + 1) * group;
                        let dots: Vec<T> = rows
                            .clone()
                            .map(|r| tx.row(r).iter().zip(gout).map(|(&a, &b)| a * b).sum::<T>())
                            .collect();
                        let mean = rows
                            .clone()
                            .zip(&dots)
                            .map(|(r, &dot)| weights[r] * dot)
                            .sum::<T>();
                        for (r, &dot) in rows.zip(&dots) {
                            d[r] = weights[r] * (dot - mean);
                        }
                    }
                    send(*scores, like(*scores, d), local);
                }
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

fn transpose_matrix<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.rows(), t.cols());
    let mut data = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor {
        shape: vec![c, r],
        data,
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        t64(shape, &v)
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let mut g = Graph::<f64>::new();
        let l = g.param(t64(&[1, 4], &[0.0; 4]));
        let loss = g.softmax_cross_entropy(l, &[2], usize::MAX, 1).unwrap();
        assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_margin_is_zero() {
        let mut g = Graph::<f64>::new();
        let l = g.param(t64(&[1, 4], &[0.0, 30.0, 0.0, 0.0]));
        let loss = g.softmax_cross_entropy(l, &[1], usize::MAX, 1).unwrap();
        assert!(g.value(loss).item() < 1e-9);
    }

    #[test]
    fn cross_entropy_reference_value() {
        // log(1 + e^-1 + e^-2), evaluated in extended precision.
        let mut g = Graph::<f64>::new();
        let l = g.param(t64(&[1, 3], &[1.0, 2.0, 3.0]));
        let loss = g.softmax_cross_entropy(l, &[2], usize::MAX, 1).unwrap();
        assert!((g.value(loss).item() - 0.407_605_964_444_380_3).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
        let mut g = Graph::<f64>::new();
        let l = g.param(t64(&[2, 3], &[1.0, 2.0, 3.0, 0.5, 0.1, -1.0]));
        let loss = g.softmax_cross_entropy(l, &[0, 0], 0, 2).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        g.backward(loss).unwrap();
        assert!(g.grad(l).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut g = Graph::<f64>::new();
        let l = g.param(t64(&[1, 3], &[1.0, 2.0, 3.0]));
        let err = g.softmax_cross_entropy(l, &[3], usize::MAX, 1).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn bce_reference_values() {
        let cases = [(0.0, 1.0, 2f64.ln()), (-2.0, 0.0, 0.126_928_011_042_972_5)];
        for (logit, target, want) in cases {
            let mut g = Graph::<f64>::new();
            let l = g.param(t64(&[1], &[logit]));
            let loss = g.bce_with_logits(l, &[target]).unwrap();
            assert!(
                (g.value(loss).item() - want).abs() < 1e-12,
                "{logit} {target}"
            );
        }
        let mut g = Graph::<f64>::new();
        let l = g.param(t64(&[1], &[40.0]));
        let loss = g.bce_with_logits(l, &[1.0]).unwrap();
        assert!(g.value(loss).item() < 1e-9);
    }

    #[test]
    fn bce_is_stable_at_large_logits() {
        for (logit, target) in [(100.0, 0.0), (-100.0, 1.0), (100.0, 1.0), (-100.0, 0.0)] {
            let mut g = Graph::<f32>::new();
            let l = g.param(Tensor::from_f64(vec![1], &[logit]).unwrap());
            let loss = g.bce_with_logits(l, &[target]).unwrap();
            let v = g.value(loss).item();
            assert!(v.is_finite());
            let want = if (logit > 0.0) == (target == 1.0) {
                0.0
            } else {
                100.0
            };
            assert!((v as f64 - want).abs() < 1e-3);
        }
    }

    #[test]
    fn bce_rejects_non_binary_target() {
        let mut g = Graph::<f64>::new();
        let l = g.param(t64(&[1], &[0.3]));
        assert!(matches!(
            g.bce_with_logits(l, &[0.5]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn detach_blocks_one_path() {
        let mut g = Graph::<f64>::new();
        let vals = [1.5, -2.0, 0.25];
        let w = g.param(t64(&[3], &vals));
        let dw = g.detach(w);
        let p = g.mul(dw, w).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &vals);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t64(&[2], &[1.0, 2.0]));
        let y = g.scale(w, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::<f32>::new();
        let a = g.param(Tensor::from_f64(vec![1], &[1e30]).unwrap());
        let b = g.param(Tensor::from_f64(vec![1], &[1e30]).unwrap());
        assert!(matches!(g.mul(a, b), Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn no_grad_mode_records_constants() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t64(&[2], &[1.0, 2.0]));
        g.set_grad_enabled(false);
        let y = g.scale(w, 3.0).unwrap();
        assert!(!g.requires_grad(y));
        g.set_grad_enabled(true);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn rms_norm_output_has_unit_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let x = g.param(random(&[5, 16], &mut rng));
        let gain = g.constant(Tensor::full(vec![16], 1.0));
        let y = g.rms_norm(x, gain, 1e-8).unwrap();
        for rms in crate::tensor::row_rms(g.value(y)) {
            assert!((rms - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn repeated_backward_after_reset_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::<f32>::new();
        let a = g.param(random(&[4, 6], &mut rng).cast::<f32>());
        let b = g.param(random(&[6, 3], &mut rng).cast::<f32>());
        let m = g.matmul(a, b).unwrap();
        let s = g.silu(m).unwrap();
        let l = g.mean(s).unwrap();
        g.backward(l).unwrap();
        let first = (g.grad(a).unwrap().clone(), g.grad(b).unwrap().clone());
        g.zero_grad();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &first.0);
        assert_eq!(g.grad(b).unwrap(), &first.1);
    }

    /// Builds a scalar from inputs through one primitive plus a fixed random
    /// projection so every output coordinate matters.
    fn check_primitive<F>(shapes: &[&[usize]], build: F, trials: usize)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(shapes.len() as u64 * 31 + 7);
        for _ in 0..trials {
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let probe_seed: u64 = rng.random();
            let eval = |vals: &[Tensor<f64>], g: &mut Graph<f64>| -> (Var, Vec<Var>) {
                let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
                let out = build(g, &vars);
                let n = g.value(out).numel();
                let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
                let probe: Vec<f64> = (0..n).map(|_| prng.random_range(-1.0..1.0)).collect();
                let shape = g.value(out).shape().to_vec();
                let p = g.constant(Tensor::new(shape, probe).unwrap());
                let m = g.mul(out, p).unwrap();
                (g.sum(m).unwrap(), vars)
            };
            let mut g = Graph::new();
            let (root, vars) = eval(&inputs, &mut g);
            g.backward(root).unwrap();
            let auto: Vec<Tensor<f64>> = vars
                .iter()
                .map(|&v| {
                    g.grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec()))
                })
                .collect();
            let numeric = finite_difference_gradient(
                |vals| {
                    let mut g = Graph::new();
                    let (root, _) = eval(vals, &mut g);
                    g.value(root).item()
                },
                &inputs,
                1e-5,
            );
            for (a, n) in auto.iter().zip(&numeric) {
                let err = max_relative_error(a, n);
                assert!(err < 1e-5, "relative error {err}");
            }
        }
    }

    #[test]
    fn gradcheck_elementwise() {
        check_primitive(&[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]).unwrap(), 20);
        check_primitive(&[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]).unwrap(), 20);
        check_primitive(&[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]).unwrap(), 20);
        check_primitive(&[&[3, 4]], |g, v| g.scale(v[0], -1.7).unwrap(), 20);
        check_primitive(&[&[3, 4]], |g, v| g.silu(v[0]).unwrap(), 20);
    }

    #[test]
    fn gradcheck_linear_algebra() {
        check_primitive(
            &[&[3, 5], &[5, 2]],
            |g, v| g.matmul(v[0], v[1]).unwrap(),
            20,
        );
        check_primitive(
            &[&[4, 4], &[12, 3]],
            |g, v| g.mix_rows(v[0], v[1]).unwrap(),
            20,
        );
        check_primitive(&[&[3, 5]], |g, v| g.transpose(v[0]).unwrap(), 10);
        check_primitive(&[&[3, 5], &[5]], |g, v| g.add_bias(v[0], v[1]).unwrap(), 20);
        check_primitive(
            &[&[3, 2], &[3, 4]],
            |g, v| g.concat_cols(v[0], v[1]).unwrap(),
            10,
        );
    }

    #[test]
    fn gradcheck_reductions_and_gather() {
        check_primitive(&[&[3, 5]], |g, v| g.sum(v[0]).unwrap(), 10);
        check_primitive(&[&[3, 5]], |g, v| g.mean(v[0]).unwrap(), 10);
        check_primitive(
            &[&[6, 3]],
            |g, v| g.gather_rows(v[0], &[5, 0, 5, 2]).unwrap(),
            10,
        );
    }

    #[test]
    fn gradcheck_normalization_and_pooling() {
        check_primitive(
            &[&[4, 8], &[8]],
            |g, v| g.rms_norm(v[0], v[1], 1e-6).unwrap(),
            30,
        );
        check_primitive(
            &[&[8, 5], &[8, 1]],
            |g, v| g.attention_pool(v[0], v[1], 4).unwrap(),
            30,
        );
    }

    #[test]
    fn gradcheck_losses() {
        check_primitive(
            &[&[6, 5]],
            |g, v| {
                g.softmax_cross_entropy(v[0], &[1, 4, 99, 0, 2, 3], 99, 3)
                    .unwrap()
            },
            30,
        );
        check_primitive(
            &[&[4, 1]],
            |g, v| g.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0]).unwrap(),
            30,
        );
    }

    #[test]
    fn gradcheck_f32_within_looser_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random(&[3, 4], &mut rng);
            let b = random(&[4, 2], &mut rng);
            let mut g = Graph::<f32>::new();
            let va = g.param(a.cast::<f32>());
            let vb = g.param(b.cast::<f32>());
            let m = g.matmul(va, vb).unwrap();
            let s = g.silu(m).unwrap();
            let l = g.sum(s).unwrap();
            g.backward(l).unwrap();
            let numeric = finite_difference_gradient(
                |vals: &[Tensor<f64>]| {
                    let mut g = Graph::<f64>::new();
                    let va = g.param(vals[0].clone());
                    let vb = g.param(vals[1].clone());
                    let m = g.matmul(va, vb).unwrap();
                    let s = g.silu(m).unwrap();
                    let l = g.sum(s).unwrap();
                    g.value(l).item()
                },
                &[a, b],
                1e-5,
            );
            let auto_a = g.grad(va).unwrap().cast::<f64>();
            assert!(max_relative_error(&auto_a, &numeric[0]) < 1e-3);
        }
    }
}
