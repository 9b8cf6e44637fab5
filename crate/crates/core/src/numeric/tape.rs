//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op evaluates eagerly, checks its output is finite and records what
//! the backward pass needs. Nodes that cannot reach a gradient-requiring leaf
//! are skipped entirely during backward, which is what keeps frozen layers
//! free of weight-gradient work.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numeric::tensor::{gelu_grad_scalar, gelu_scalar, gemm, log_sum_exp, softmax_row};
use crate::numeric::{ParamId, ParamStore, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<usize>,
        probs: Vec<f64>,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    MseSum(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass. Parameter values are borrowed, not copied.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    bound: HashMap<(u64, usize), Var>,
    leaves: Vec<(Var, u64, ParamId)>,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    leaves: Vec<(Var, u64, ParamId)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds the gradient of every leaf bound from `store` into its accumulator.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(var, tag, id) in &self.leaves {
            if tag != store.tag() {
                continue;
            }
            if let Some(g) = &self.grads[var.0] {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output from {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that gradients flow to.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Binds a stored parameter; frozen parameters become constants.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Result<Var> {
        let key = (store.tag(), id.0);
        if let Some(&v) = self.bound.get(&key) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = self.push(Cow::Borrowed(&p.value), Op::Leaf, p.trainable)?;
        self.bound.insert(key, v);
        if p.trainable {
            self.leaves.push((v, store.tag(), id));
        }
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(Cow::Owned(out), Op::MatMul(a, b), rg)
    }

    /// `y = x·wᵀ + b` with `w` stored `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, d_in) = xv.dims2()?;
        let (d_out, w_in) = wv.dims2()?;
        if wv.shape().len() != 2 || w_in != d_in {
            return Err(Error::dim(format!(
                "linear: input {:?} vs weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let mut out = vec![0.0; n * d_out];
        gemm(n, d_in, d_out, xv.data(), false, wv.data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != d_out {
                return Err(Error::dim(format!(
                    "linear: bias {:?} for {d_out} outputs",
                    bv.shape()
                )));
            }
            for row in out.chunks_mut(d_out) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let shape = if xv.shape().len() == 1 {
            vec![d_out]
        } else {
            vec![n, d_out]
        };
        let mut vars = vec![x, w];
        vars.extend(b);
        let rg = self.rg(&vars);
        self.push(Cow::Owned(Tensor::new(shape, out)?), Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(Cow::Owned(out), Op::Add(a, b), rg)
    }

    /// Adds vector `v` to every row of `x`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let xv = self.value(x);
        let vv = self.value(v);
        let (_, c) = xv.dims2()?;
        if vv.len() != c {
            return Err(Error::dim(format!(
                "add_row: rows of width {c} vs vector {:?}",
                vv.shape()
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, a) in row.iter_mut().zip(vv.data()) {
                *o += a;
            }
        }
        let rg = self.rg(&[x, v]);
        self.push(Cow::Owned(out), Op::AddRow(x, v), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(out), Op::Scale(x, s), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_scalar);
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(out), Op::Gelu(x), rg)
    }

    /// Row-wise layer norm with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = xv.dims2()?;
        let g = self.value(gamma);
        let b = self.value(beta);
        if g.len() != c || b.len() != c {
            return Err(Error::dim("layer_norm: gain/bias width"));
        }
        let mut xhat = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Cow::Owned(Tensor::new(shape, out)?),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Multi-head causal self-attention over stacked sequences.
    ///
    /// `q`, `k`, `v` are `[N × h]`; `segments` lists the lengths of the
    /// sequences stacked along the rows and must sum to `N`. Row `i` of a
    /// segment attends to rows `0..=i` of the same segment only.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[usize],
    ) -> Result<Var> {
        let (n, h) = self.value(q).dims2()?;
        if self.value(k).shape() != self.value(q).shape()
            || self.value(v).shape() != self.value(q).shape()
        {
            return Err(Error::dim("attention: q/k/v shapes differ"));
        }
        if heads == 0 || h % heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {h} not divisible by {heads} heads"
            )));
        }
        if segments.iter().sum::<usize>() != n || segments.contains(&0) {
            return Err(Error::dim(format!(
                "attention: segments {segments:?} do not tile {n} rows"
            )));
        }
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; n * h];
        let mut probs = Vec::with_capacity(segments.iter().map(|t| t * t * heads).sum());
        let mut off = 0;
        let mut row = Vec::new();
        for &t in segments {
            for hd in 0..heads {
                let c0 = hd * dh;
                for i in 0..t {
                    let qi = &qd[(off + i) * h + c0..(off + i) * h + c0 + dh];
                    row.clear();
                    for j in 0..=i {
                        let kj = &kd[(off + j) * h + c0..(off + j) * h + c0 + dh];
                        row.push(dot(qi, kj) * scale);
                    }
                    softmax_row(&mut row);
                    let oi = &mut out[(off + i) * h + c0..(off + i) * h + c0 + dh];
                    for (j, &p) in row.iter().enumerate() {
                        let vj = &vd[(off + j) * h + c0..(off + j) * h + c0 + dh];
                        for (o, vv) in oi.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                    probs.extend_from_slice(&row);
                    probs.extend(std::iter::repeat_n(0.0, t - i - 1));
                }
            }
            off += t;
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            Cow::Owned(Tensor::matrix(n, h, out)?),
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Selects rows of a matrix (embedding lookup when `src` is a table).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let (r, c) = sv.dims2()?;
        if idx.is_empty() {
            return Err(Error::Empty("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index(format!("row {i} of {r}")));
            }
            out.extend_from_slice(&sv.data()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[src]);
        self.push(
            Cow::Owned(Tensor::matrix(idx.len(), c, out)?),
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// `Σ (a − b)²` over all entries.
    pub fn mse_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let l = crate::numeric::tensor::mse_seq_loss(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(Cow::Owned(Tensor::scalar(l)), Op::MseSum(a, b), rg)
    }

    /// Mean over rows of `−log softmax(logits_row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vocab) = lv.dims2()?;
        if targets.len() != n {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        let mut total = 0.0;
        let mut probs = lv.data().to_vec();
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::Index(format!("target {t} outside vocabulary of {vocab}")));
            }
            let row = &lv.data()[r * vocab..(r + 1) * vocab];
            total += log_sum_exp(row) - row[t];
            softmax_row(&mut probs[r * vocab..(r + 1) * vocab]);
        }
        let rg = self.rg(&[logits]);
        self.push(
            Cow::Owned(Tensor::scalar(total / n as f64)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// `Σ x ⊙ weights`, a scalar probe used by gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::dim("weighted_sum: length mismatch"));
        }
        let s = dot(xv.data(), weights.data());
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::WeightedSum { x, weights }, rg)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            leaves: self.leaves.clone(),
        })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut da, false);
                    self.accum(grads, *a, Tensor::new(self.value(*a).shape().to_vec(), da)?)?;
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut db, false);
                    self.accum(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db)?)?;
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, d_in) = xv.dims2()?;
                let (d_out, _) = wv.dims2()?;
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; n * d_in];
                    gemm(n, d_out, d_in, g.data(), false, wv.data(), false, &mut dx, false);
                    self.accum(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; d_out * d_in];
                    gemm(d_out, n, d_in, g.data(), true, xv.data(), false, &mut dw, false);
                    self.accum(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?)?;
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let db = column_sums(g.data(), d_out);
                        self.accum(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db)?)?;
                    }
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone())?;
                self.accum(grads, *b, g.clone())?;
            }
            Op::AddRow(x, v) => {
                self.accum(grads, *x, g.clone())?;
                if self.requires_grad(*v) {
                    let vv = self.value(*v);
                    let dv = column_sums(g.data(), vv.len());
                    self.accum(grads, *v, Tensor::new(vv.shape().to_vec(), dv)?)?;
                }
            }
            Op::Scale(x, s) => self.accum(grads, *x, g.scale(*s))?,
            Op::Gelu(x) => {
                let dx = self.value(*x).zip_map(g, |xv, gv| gelu_grad_scalar(xv) * gv)?;
                self.accum(grads, *x, dx)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gamma).len();
                let n = inv_std.len();
                let gd = g.data();
                if self.requires_grad(*gamma) {
                    let mut dg = vec![0.0; c];
                    for r in 0..n {
                        for j in 0..c {
                            dg[j] += gd[r * c + j] * xhat[r * c + j];
                        }
                    }
                    self.accum(grads, *gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dg)?)?;
                }
                if self.requires_grad(*beta) {
                    let db = column_sums(gd, c);
                    self.accum(grads, *beta, Tensor::new(self.value(*beta).shape().to_vec(), db)?)?;
                }
                if self.requires_grad(*x) {
                    let gamma_v = self.value(*gamma).data();
                    let mut dx = vec![0.0; n * c];
                    for r in 0..n {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dxh = gd[r * c + j] * gamma_v[j];
                            s1 += dxh;
                            s2 += dxh * xhat[r * c + j];
                        }
                        for j in 0..c {
                            let dxh = gd[r * c + j] * gamma_v[j];
                            dx[r * c + j] = inv_std[r] / c as f64
                                * (c as f64 * dxh - s1 - xhat[r * c + j] * s2);
                        }
                    }
                    self.accum(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?)?;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, segments, probs, g, grads)?,
            Op::GatherRows { src, idx } => {
                let sv = self.value(*src);
                let (_, c) = sv.dims2()?;
                let mut ds = vec![0.0; sv.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        ds[i * c + j] += g.data()[r * c + j];
                    }
                }
                self.accum(grads, *src, Tensor::new(sv.shape().to_vec(), ds)?)?;
            }
            Op::MseSum(a, b) => {
                let s = g.data()[0];
                let diff = self.value(*a).sub(self.value(*b))?;
                if self.requires_grad(*a) {
                    self.accum(grads, *a, diff.scale(2.0 * s))?;
                }
                if self.requires_grad(*b) {
                    self.accum(grads, *b, diff.scale(-2.0 * s))?;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let (n, vocab) = lv.dims2()?;
                let s = g.data()[0] / n as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * vocab + t] -= 1.0;
                }
                for x in &mut d {
                    *x *= s;
                }
                self.accum(grads, *logits, Tensor::new(lv.shape().to_vec(), d)?)?;
            }
            Op::WeightedSum { x, weights } => {
                let w = weights.scale(g.data()[0]);
                let w = w.reshape(self.value(*x).shape())?;
                self.accum(grads, *x, w)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[usize],
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (n, h) = self.value(q).dims2()?;
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd, gd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            g.data(),
        );
        let mut dq = vec![0.0; n * h];
        let mut dk = vec![0.0; n * h];
        let mut dv = vec![0.0; n * h];
        let mut off = 0;
        let mut pbase = 0;
        let mut ds = Vec::new();
        for &t in segments {
            for hd in 0..heads {
                let c0 = hd * dh;
                for i in 0..t {
                    let p = &probs[pbase + i * t..pbase + i * t + i + 1];
                    let gi = &gd[(off + i) * h + c0..(off + i) * h + c0 + dh];
                    ds.clear();
                    let mut weighted = 0.0;
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vd[(off + j) * h + c0..(off + j) * h + c0 + dh];
                        let dp = dot(gi, vj);
                        ds.push(dp);
                        weighted += pj * dp;
                        let dvj = &mut dv[(off + j) * h + c0..(off + j) * h + c0 + dh];
                        for (a, b) in dvj.iter_mut().zip(gi) {
                            *a += pj * b;
                        }
                    }
                    for (j, &pj) in p.iter().enumerate() {
                        let s = pj * (ds[j] - weighted) * scale;
                        if s == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            dq[(off + i) * h + c0 + c] += s * kd[(off + j) * h + c0 + c];
                            dk[(off + j) * h + c0 + c] += s * qd[(off + i) * h + c0 + c];
                        }
                    }
                }
                pbase += t * t;
            }
            off += t;
        }
        self.accum(grads, q, Tensor::matrix(n, h, dq)?)?;
        self.accum(grads, k, Tensor::matrix(n, h, dk)?)?;
        self.accum(grads, v, Tensor::matrix(n, h, dv)?)?;
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn column_sums(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for row in data.chunks(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Linear { .. } => "linear",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::Gelu(_) => "gelu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Attention { .. } => "causal_attention",
        Op::GatherRows { .. } => "gather_rows",
        Op::MseSum(..) => "mse_sum",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::WeightedSum { .. } => "weighted_sum",
    }
}
