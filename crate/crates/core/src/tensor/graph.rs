//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes are stored in creation order, which is
//! a topological order, so [`Graph::backward`] is a single reverse sweep that
//! visits each node once.

use super::{kernels, Element, Tensor};
use crate::attention::{self, AttentionPattern, AttentionStats, SavedAttention};
use crate::error::{Error, Result};
use crate::positional::RopeTable;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Silu(Var),
    Sum(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv: Vec<S>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        cos: Vec<S>,
        sin: Vec<S>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        saved: SavedAttention<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<S>,
        count: usize,
    },
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// A single forward pass recorded for differentiation.
pub struct Graph<S: Element = f32> {
    nodes: Vec<Node<S>>,
    attention_stats: Vec<AttentionStats>,
}

impl<S: Element> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Element> Grads<S> {
    /// Gradient of the loss with respect to `v`, present only when `v`
    /// requires a gradient and is reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `tensor`'s buffer (converted to `f32`).
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        if let Some(g) = self.get(v) {
            let g32: Vec<f32> = g.iter().map(|x| x.as_f32()).collect();
            tensor.accumulate_grad(&g32)?;
        }
        Ok(())
    }
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(format!("expected a 2-D operand, got {s:?}"))),
    }
}

impl<S: Element> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            attention_stats: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, requires_grad: bool, op: Op<S>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf carrying `tensor`'s values; differentiable iff the tensor requires grad.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let value = tensor.data().iter().map(|&x| S::from_f32(x)).collect();
        self.push(tensor.shape().to_vec(), value, tensor.requires_grad(), Op::Leaf)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        let value = tensor.data().iter().map(|&x| S::from_f32(x)).collect();
        self.push(tensor.shape().to_vec(), value, false, Op::Leaf)
    }

    /// Leaf from raw working-precision values.
    pub fn input(&mut self, shape: Vec<usize>, value: Vec<S>, requires_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} does not match {} values",
                value.len()
            )));
        }
        Ok(self.push(shape, value, requires_grad, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copies a node's value out as an `f32` tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.iter().map(|x| x.as_f32()).collect())
            .expect("node shape is consistent")
    }

    /// Attention statistics recorded by every attention op, in call order.
    pub fn attention_stats(&self) -> &[AttentionStats] {
        &self.attention_stats
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a))?;
        let (k2, n) = dims2(self.shape(b))?;
        if k != k2 {
            return Err(Error::dim(format!("matmul {m}×{k} · {k2}×{n}")));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`, the layout of a linear layer whose weight is `[out × in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a))?;
        let (n, k2) = dims2(self.shape(b))?;
        if k != k2 {
            return Err(Error::dim(format!("matmul_nt {m}×{k} · ({n}×{k2})ᵀ")));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_nt_acc(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMulNt(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, rg, Op::Scale(a, c))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::silu(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, rg, Op::Silu(a))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x.as_f64()).sum::<f64>();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![S::from_f64(s)], rg, Op::Sum(a))
    }

    /// RMS normalization over the last axis of a 2-D input.
    pub fn rms_norm(&mut self, x: Var, w: Var) -> Result<Var> {
        let (rows, d) = dims2(self.shape(x))?;
        if self.value(w).len() != d {
            return Err(Error::dim(format!(
                "norm weight of {} for width {d}",
                self.value(w).len()
            )));
        }
        let xs = self.value(x);
        let ws = self.value(w);
        let mut out = vec![S::zero(); rows * d];
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let ir = kernels::inv_rms(row, super::RMS_NORM_EPS);
            inv.push(ir);
            for j in 0..d {
                out[r * d + j] = ws[j] * row[j] * ir;
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(vec![rows, d], out, rg, Op::RmsNorm { x, w, inv }))
    }

    /// Row softmax of a 2-D input with an optional additive mask of 0 / -inf.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[S]>) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(x))?;
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(Error::dim("softmax mask size"));
            }
        }
        let mut out = vec![S::zero(); rows * cols];
        let xs = self.value(x);
        for r in 0..rows {
            let mrow = mask.map(|m| &m[r * cols..(r + 1) * cols]);
            if !kernels::softmax_row(
                &xs[r * cols..(r + 1) * cols],
                mrow,
                &mut out[r * cols..(r + 1) * cols],
            ) {
                return Err(Error::DegenerateRow { row: r });
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows, cols], out, rg, Op::Softmax(x)))
    }

    /// Gathers rows `ids` of a `[vocab × d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = dims2(self.shape(table))?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("token id {id} ≥ vocab {vocab}")));
            }
            out.extend_from_slice(&self.value(table)[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Rotary embedding of a `[seq × heads·head_dim]` input.
    pub fn rope(&mut self, x: Var, table: &RopeTable, positions: &[usize]) -> Result<Var> {
        let (seq, width) = dims2(self.shape(x))?;
        let hd = table.head_dim();
        if width % hd != 0 {
            return Err(Error::dim(format!("width {width} is not a multiple of head_dim {hd}")));
        }
        if positions.len() != seq {
            return Err(Error::dim(format!("{} positions for {seq} rows", positions.len())));
        }
        let half = hd / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for &p in positions {
            let (c, s) = table.row(p)?;
            cos.extend(c.iter().map(|&v| S::from_f32(v)));
            sin.extend(s.iter().map(|&v| S::from_f32(v)));
        }
        let out = rotate_pairs(self.value(x), &cos, &sin, seq, width, hd, false);
        let rg = self.rg(x);
        Ok(self.push(vec![seq, width], out, rg, Op::Rope { x, cos, sin }))
    }

    /// Multi-head attention over `[seq × heads·head_dim]` projections.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        pattern: AttentionPattern,
    ) -> Result<Var> {
        let (seq, width) = dims2(self.shape(q))?;
        if self.shape(k) != [seq, width] || self.shape(v) != [seq, width] {
            return Err(Error::dim("q, k, v shapes differ"));
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::dim(format!("width {width} not divisible by {heads} heads")));
        }
        let (out, saved, stats) = attention::forward_kernel(
            self.value(q),
            self.value(k),
            self.value(v),
            seq,
            heads,
            width / heads,
            pattern,
        )?;
        self.attention_stats.push(stats);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            vec![seq, width],
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                heads,
                saved,
            },
        ))
    }

    /// Mean next-token negative log-likelihood over rows where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, vocab) = dims2(self.shape(logits))?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::dim(format!(
                "{} targets / {} mask entries for {rows} logit rows",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("every position is masked out of the loss".into()));
        }
        let lv = self.value(logits);
        let mut probs = vec![S::zero(); rows * vocab];
        let mut total = 0.0f64;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::Index(format!("target {t} ≥ vocab {vocab}")));
            }
            let row = &lv[r * vocab..(r + 1) * vocab];
            total += row_nll(row, t);
            kernels::softmax_row(row, None, &mut probs[r * vocab..(r + 1) * vocab]);
        }
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric("cross-entropy is not finite".into()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![S::from_f64(loss)],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Index(format!("no node {}", loss.0)))?;
        if node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !node.requires_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a))?;
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let ga = slot(grads, *a, m * k);
                    kernels::matmul_nt_acc(g, self.value(*b), m, n, k, ga);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let gb = slot(grads, *b, k * n);
                    kernels::matmul_tn_acc(self.value(*a), g, m, k, n, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims2(self.shape(*a))?;
                let n = self.shape(*b)[0];
                if self.rg(*a) {
                    // dA = dC · B
                    let ga = slot(grads, *a, m * k);
                    kernels::matmul_acc(g, self.value(*b), m, n, k, ga);
                }
                if self.rg(*b) {
                    // dB = dCᵀ · A
                    let gb = slot(grads, *b, n * k);
                    kernels::matmul_tn_acc(g, self.value(*a), m, n, k, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        let gv = slot(grads, v, g.len());
                        kernels::axpy(S::one(), g, gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let ga = slot(grads, *a, g.len());
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o = *o + gi * bi;
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let gb = slot(grads, *b, g.len());
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *o = *o + gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = slot(grads, *a, g.len());
                kernels::axpy(*c, g, ga);
            }
            Op::Silu(a) => {
                let av = self.value(*a);
                let ga = slot(grads, *a, g.len());
                for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                    *o = *o + gi * kernels::silu_grad(x);
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let ga = slot(grads, *a, n);
                for o in ga.iter_mut() {
                    *o = *o + g[0];
                }
            }
            Op::RmsNorm { x, w, inv } => {
                let (rows, d) = dims2(self.shape(*x))?;
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.rg(*x) {
                    let gx = slot(grads, *x, rows * d);
                    let dn = S::from_f64(d as f64);
                    for r in 0..rows {
                        let ir = inv[r];
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let proj: S = (0..d).map(|j| gr[j] * wv[j] * xr[j]).sum();
                        let coef = ir * ir * ir * proj / dn;
                        for j in 0..d {
                            gx[r * d + j] = gx[r * d + j] + ir * wv[j] * gr[j] - coef * xr[j];
                        }
                    }
                }
                if self.rg(*w) {
                    let gw = slot(grads, *w, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gw[j] = gw[j] + g[r * d + j] * xv[r * d + j] * inv[r];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let (rows, cols) = dims2(&node.shape)?;
                let y = &node.value;
                let gx = slot(grads, *x, rows * cols);
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot = kernels::dot(yr, gr);
                    for j in 0..cols {
                        gx[r * cols + j] = gx[r * cols + j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (vocab, d) = dims2(self.shape(*table))?;
                let gt = slot(grads, *table, vocab * d);
                for (r, &id) in ids.iter().enumerate() {
                    kernels::axpy(S::one(), &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                }
            }
            Op::Rope { x, cos, sin } => {
                let (seq, width) = dims2(self.shape(*x))?;
                let hd = 2 * cos.len() / seq.max(1);
                let back = rotate_pairs(g, cos, sin, seq, width, hd, true);
                let gx = slot(grads, *x, seq * width);
                kernels::axpy(S::one(), &back, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                saved,
            } => {
                let (seq, width) = dims2(self.shape(*q))?;
                let (dq, dk, dv) = attention::backward_kernel(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    g,
                    saved,
                    seq,
                    *heads,
                    width / *heads,
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.rg(var) {
                        kernels::axpy(S::one(), &d, slot(grads, var, seq * width));
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let (rows, vocab) = dims2(self.shape(*logits))?;
                let scale = g[0] / S::from_f64(*count as f64);
                let gl = slot(grads, *logits, rows * vocab);
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    for j in 0..vocab {
                        gl[r * vocab + j] = gl[r * vocab + j] + scale * probs[r * vocab + j];
                    }
                    gl[r * vocab + targets[r]] = gl[r * vocab + targets[r]] - scale;
                }
            }
        }
        Ok(())
    }
}

fn slot<S: Element>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

/// `-log softmax(row)[target]` accumulated in 64-bit.
pub(crate) fn row_nll<S: Element>(row: &[S], target: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
    lse - row[target].as_f64()
}

/// Rotates interleaved pairs `(x[2i], x[2i+1])` of every head by the
/// per-row angles; `inverse` rotates by the negated angles.
pub(crate) fn rotate_pairs<S: Element>(
    x: &[S],
    cos: &[S],
    sin: &[S],
    seq: usize,
    width: usize,
    hd: usize,
    inverse: bool,
) -> Vec<S> {
    let half = hd / 2;
    let mut out = vec![S::zero(); seq * width];
    for t in 0..seq {
        let c = &cos[t * half..(t + 1) * half];
        let s = &sin[t * half..(t + 1) * half];
        for h in 0..width / hd {
            let base = t * width + h * hd;
            for i in 0..half {
                let x0 = x[base + 2 * i];
                let x1 = x[base + 2 * i + 1];
                let (ci, si) = (c[i], if inverse { -s[i] } else { s[i] });
                out[base + 2 * i] = x0 * ci - x1 * si;
                out[base + 2 * i + 1] = x0 * si + x1 * ci;
            }
        }
    }
    out
}
