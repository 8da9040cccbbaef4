//! Define-by-run reverse-mode differentiation over [`DenseTensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s together with
//! the forward value. [`Tape::backward`] replays the records in reverse
//! insertion order, which is a valid topological order because a node can
//! only reference nodes created before it.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::sparse::{spmm, spmm_transpose, SparseRowMatrix};
use super::tensor::{self, dot, matmul, matmul_nt, matmul_tn, DenseTensor};
use crate::error::{dim_err, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const LAYER_NORM_EPS: f64 = 1e-8;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Masking layout for batched multi-head self-attention over
/// left-padded sequences stored as `(batch · len) × d`.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub len: usize,
    pub heads: usize,
    pub causal: bool,
    /// Number of valid (non-padding) trailing positions per sequence.
    pub valid_lengths: Vec<usize>,
}

impl AttentionLayout {
    fn first_valid(&self, b: usize) -> usize {
        self.len - self.valid_lengths[b]
    }

    fn allowed(&self, b: usize, query: usize, key: usize) -> bool {
        let first = self.first_valid(b);
        query >= first && key >= first && (!self.causal || key <= query)
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    SpMM(Arc<SparseRowMatrix>, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Gelu(usize),
    Softmax(usize),
    Concat(usize, usize),
    L2Normalize(usize, Vec<f64>),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: DenseTensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        probs: Vec<f64>,
        layout: AttentionLayout,
    },
    GroupDot {
        h: usize,
        cands: usize,
        group: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: DenseTensor,
        scale: f64,
    },
    Sum(usize),
}

struct Node {
    value: DenseTensor,
    op: Op,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseTensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {v:?} is not recorded on tape {}",
                self.id
            )));
        }
        Ok(v.index)
    }

    fn val(&self, i: usize) -> &DenseTensor {
        &self.nodes[i].value
    }

    /// Records an input tensor. Gradients are available for every leaf.
    pub fn leaf(&mut self, value: DenseTensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A new leaf holding a copy of `v`'s value; no gradient flows back to `v`.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v)?.clone();
        Ok(self.leaf(value))
    }

    pub fn value(&self, v: Var) -> Result<&DenseTensor> {
        Ok(self.val(self.idx(v)?))
    }

    /// Post-softmax attention weights recorded by [`Tape::attention`],
    /// laid out `[batch][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Result<&[f64]> {
        match &self.nodes[self.idx(v)?].op {
            Op::Attention { probs, .. } => Ok(probs),
            _ => Err(Error::Usage("node is not an attention output".into())),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = matmul(self.val(ia), self.val(ib))?;
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = matmul_nt(self.val(ia), self.val(ib))?;
        Ok(self.push(out, Op::MatMulNt(ia, ib)))
    }

    /// Sparse-constant times dense; differentiable in `x` only.
    pub fn spmm(&mut self, a: Arc<SparseRowMatrix>, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = spmm(&a, self.val(ix))?;
        Ok(self.push(out, Op::SpMM(a, ix)))
    }

    /// Row `i` of the output is row `indices[i]` of `x`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, indices: &[Option<usize>]) -> Result<Var> {
        let n = self.value(x)?.rows();
        if let Some(bad) = indices.iter().flatten().find(|&&i| i >= n) {
            return Err(dim_err(
                "gather_rows",
                format!("row {bad} out of range for {n} rows"),
            ));
        }
        let sel = SparseRowMatrix::selection(indices, n)?;
        self.spmm(Arc::new(sel), x)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = tensor::add(self.val(ia), self.val(ib))?;
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    /// Adds a `1 × c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (ix, ir) = (self.idx(x)?, self.idx(row)?);
        let (xv, rv) = (self.val(ix), self.val(ir));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(dim_err(
                "add_row",
                format!("{:?} + row {:?}", xv.shape(), rv.shape()),
            ));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rv.values()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(ix, ir)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = tensor::hadamard(self.val(ia), self.val(ib))?;
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = tensor::scale(self.val(ix), s);
        Ok(self.push(out, Op::Scale(ix, s)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.val(ix).map(tensor::sigmoid);
        Ok(self.push(out, Op::Sigmoid(ix)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.val(ix).map(gelu);
        Ok(self.push(out, Op::Gelu(ix)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = tensor::rowwise_softmax(self.val(ix));
        Ok(self.push(out, Op::Softmax(ix)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = tensor::concat_cols(self.val(ia), self.val(ib))?;
        Ok(self.push(out, Op::Concat(ia, ib)))
    }

    /// Zero rows stay zero and pass no gradient.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = self.val(ix);
        let norms: Vec<f64> = (0..xv.rows())
            .map(|r| dot(xv.row(r), xv.row(r)).sqrt())
            .collect();
        let mut out = xv.clone();
        for (r, &n) in norms.iter().enumerate() {
            if n > 0.0 {
                out.row_mut(r).iter_mut().for_each(|v| *v /= n);
            }
        }
        Ok(self.push(out, Op::L2Normalize(ix, norms)))
    }

    /// Row-wise layer normalization with `1 × c` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xv = self.val(ix);
        let c = xv.cols();
        self.val(ig).expect_shape("layer_norm.gamma", 1, c)?;
        self.val(ib).expect_shape("layer_norm.beta", 1, c)?;
        let mut xhat = DenseTensor::zeros(xv.rows(), c);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (h, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let (g, b) = (self.val(ig).values(), self.val(ib).values());
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for ((o, &gv), &bv) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
        ))
    }

    /// Scaled dot-product attention over `heads` equal slices of the
    /// feature dimension. Padding queries produce zero rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (iq, ik, iv) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let (qv, kv, vv) = (self.val(iq), self.val(ik), self.val(iv));
        let t = layout.len;
        let batch = layout.valid_lengths.len();
        let d = qv.cols();
        if layout.heads == 0 || d % layout.heads != 0 {
            return Err(dim_err(
                "attention",
                format!("d={d} not divisible by {} heads", layout.heads),
            ));
        }
        for m in [qv, kv, vv] {
            m.expect_shape("attention", batch * t, d)?;
        }
        if let Some(&bad) = layout.valid_lengths.iter().find(|&&l| l == 0 || l > t) {
            return Err(Error::Usage(format!("valid length {bad} outside [1, {t}]")));
        }
        let heads = layout.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * t * t];
        let mut out = DenseTensor::zeros(batch * t, d);
        let mut scores = vec![0.0; t];
        for b in 0..batch {
            let first = layout.first_valid(b);
            for h in 0..heads {
                let cs = h * dh..(h + 1) * dh;
                for i in first..t {
                    let qi = &qv.row(b * t + i)[cs.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..t {
                        if layout.allowed(b, i, j) {
                            let s = dot(qi, &kv.row(b * t + j)[cs.clone()]) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    let base = ((b * heads + h) * t + i) * t;
                    let mut sum = 0.0;
                    for j in 0..t {
                        if layout.allowed(b, i, j) {
                            let e = (scores[j] - max).exp();
                            probs[base + j] = e;
                            sum += e;
                        }
                    }
                    let orow = &mut out.row_mut(b * t + i)[cs.clone()];
                    for j in 0..t {
                        if layout.allowed(b, i, j) {
                            let p = probs[base + j] / sum;
                            probs[base + j] = p;
                            for (o, &x) in orow.iter_mut().zip(&vv.row(b * t + j)[cs.clone()]) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q: iq,
                k: ik,
                v: iv,
                probs,
                layout,
            },
        ))
    }

    /// `out[b][c] = h_b · cands_{b·group + c}` for `h: B × d`,
    /// `cands: (B·group) × d`.
    pub fn group_dot(&mut self, h: Var, cands: Var, group: usize) -> Result<Var> {
        let (ih, ic) = (self.idx(h)?, self.idx(cands)?);
        let (hv, cv) = (self.val(ih), self.val(ic));
        cv.expect_shape("group_dot", hv.rows() * group, hv.cols())?;
        let mut out = DenseTensor::zeros(hv.rows(), group);
        for b in 0..hv.rows() {
            for c in 0..group {
                out.set(b, c, dot(hv.row(b), cv.row(b * group + c)));
            }
        }
        Ok(self.push(
            out,
            Op::GroupDot {
                h: ih,
                cands: ic,
                group,
            },
        ))
    }

    /// Mean over rows of `−log softmax(scale · logits_b)[targets_b]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], scale: f64) -> Result<Var> {
        let il = self.idx(logits)?;
        let lv = self.val(il);
        if targets.len() != lv.rows() || lv.rows() == 0 {
            return Err(dim_err(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), lv.rows()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(Error::Usage(format!(
                "target index {t} out of range for {} candidates",
                lv.cols()
            )));
        }
        let mut probs = tensor::scale(lv, scale);
        let mut total = 0.0;
        for (b, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(b);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            tensor::softmax_in_place(row);
        }
        let out = DenseTensor::scalar(total / targets.len() as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
                scale,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.val(ix).values().iter().sum();
        Ok(self.push(DenseTensor::scalar(s), Op::Sum(ix)))
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.val(li).len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.val(li).shape()
            )));
        }
        let mut grads: Vec<Option<DenseTensor>> = vec![None; self.nodes.len()];
        grads[li] = Some(DenseTensor::scalar(1.0));
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }

    fn propagate(
        &self,
        i: usize,
        g: &DenseTensor,
        grads: &mut [Option<DenseTensor>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = matmul_nt(g, self.val(*b))?;
                let db = matmul_tn(self.val(*a), g)?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MatMulNt(a, b) => {
                let da = matmul(g, self.val(*b))?;
                let db = matmul_tn(g, self.val(*a))?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::SpMM(a, x) => accumulate(grads, *x, spmm_transpose(a, g)?),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, r) => {
                let mut dr = DenseTensor::zeros(1, g.cols());
                for row in 0..g.rows() {
                    for (o, &v) in dr.values_mut().iter_mut().zip(g.row(row)) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *r, dr);
            }
            Op::Mul(a, b) => {
                let da = tensor::hadamard(g, self.val(*b))?;
                let db = tensor::hadamard(g, self.val(*a))?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale(x, s) => accumulate(grads, *x, tensor::scale(g, *s)),
            Op::Sigmoid(x) => {
                let y = &node.value;
                let dx = zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv));
                accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let dx = zip_map(g, self.val(*x), |gv, xv| gv * gelu_grad(xv));
                accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut dx = DenseTensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s = dot(g.row(r), y.row(r));
                    for ((o, &gv), &yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yv * (gv - s);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat(a, b) => {
                let ca = self.val(*a).cols();
                let cb = self.val(*b).cols();
                let mut da = DenseTensor::zeros(g.rows(), ca);
                let mut db = DenseTensor::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::L2Normalize(x, norms) => {
                let y = &node.value;
                let mut dx = DenseTensor::zeros(y.rows(), y.cols());
                for (r, &n) in norms.iter().enumerate() {
                    if n > 0.0 {
                        let s = dot(y.row(r), g.row(r));
                        for ((o, &gv), &yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r))
                        {
                            *o = (gv - yv * s) / n;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.val(*gamma).values();
                let c = xhat.cols();
                let mut dx = DenseTensor::zeros(xhat.rows(), c);
                let mut dg = DenseTensor::zeros(1, c);
                let mut db = DenseTensor::zeros(1, c);
                let mut dxhat = vec![0.0; c];
                for r in 0..xhat.rows() {
                    let (gr, hr) = (g.row(r), xhat.row(r));
                    for j in 0..c {
                        dg.values_mut()[j] += gr[j] * hr[j];
                        db.values_mut()[j] += gr[j];
                        dxhat[j] = gr[j] * gam[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dh = dot(&dxhat, hr) / c as f64;
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv_std[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dg);
                accumulate(grads, *beta, db);
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                layout,
            } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, probs, layout, g);
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
            Op::GroupDot { h, cands, group } => {
                let (hv, cv) = (self.val(*h), self.val(*cands));
                let mut dh = DenseTensor::zeros(hv.rows(), hv.cols());
                let mut dc = DenseTensor::zeros(cv.rows(), cv.cols());
                for b in 0..hv.rows() {
                    for c in 0..*group {
                        let w = g.get(b, c);
                        let ci = b * group + c;
                        for (o, &x) in dh.row_mut(b).iter_mut().zip(cv.row(ci)) {
                            *o += w * x;
                        }
                        for (o, &x) in dc.row_mut(ci).iter_mut().zip(hv.row(b)) {
                            *o = w * x;
                        }
                    }
                }
                accumulate(grads, *h, dh);
                accumulate(grads, *cands, dc);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                scale,
            } => {
                let upstream = g.values()[0];
                let w = upstream * scale / targets.len() as f64;
                let mut dl = tensor::scale(probs, w);
                for (b, &t) in targets.iter().enumerate() {
                    let cur = dl.get(b, t);
                    dl.set(b, t, cur - w);
                }
                accumulate(grads, *logits, dl);
            }
            Op::Sum(x) => {
                let [r, c] = self.val(*x).shape();
                accumulate(grads, *x, DenseTensor::filled(r, c, g.values()[0]));
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        q: usize,
        k: usize,
        v: usize,
        probs: &[f64],
        layout: &AttentionLayout,
        g: &DenseTensor,
    ) -> (DenseTensor, DenseTensor, DenseTensor) {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let t = layout.len;
        let d = qv.cols();
        let heads = layout.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = layout.valid_lengths.len();
        let mut dq = DenseTensor::zeros(qv.rows(), d);
        let mut dk = DenseTensor::zeros(kv.rows(), d);
        let mut dv = DenseTensor::zeros(vv.rows(), d);
        let mut dp = vec![0.0; t];
        for b in 0..batch {
            let first = layout.first_valid(b);
            for h in 0..heads {
                let cs = h * dh..(h + 1) * dh;
                for i in first..t {
                    let base = ((b * heads + h) * t + i) * t;
                    let gi = &g.row(b * t + i)[cs.clone()];
                    let mut weighted = 0.0;
                    for j in 0..t {
                        if layout.allowed(b, i, j) {
                            let p = probs[base + j];
                            dp[j] = dot(gi, &vv.row(b * t + j)[cs.clone()]);
                            weighted += p * dp[j];
                            for (o, &x) in dv.row_mut(b * t + j)[cs.clone()].iter_mut().zip(gi) {
                                *o += p * x;
                            }
                        }
                    }
                    for j in 0..t {
                        if layout.allowed(b, i, j) {
                            let ds = probs[base + j] * (dp[j] - weighted) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = &kv.row(b * t + j)[cs.clone()];
                            for (o, &x) in dq.row_mut(b * t + i)[cs.clone()].iter_mut().zip(krow) {
                                *o += ds * x;
                            }
                            let qrow = &qv.row(b * t + i)[cs.clone()];
                            for (o, &x) in dk.row_mut(b * t + j)[cs.clone()].iter_mut().zip(qrow) {
                                *o += ds * x;
                            }
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn accumulate(grads: &mut [Option<DenseTensor>], i: usize, g: DenseTensor) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &DenseTensor, b: &DenseTensor, f: impl Fn(f64, f64) -> f64) -> DenseTensor {
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f(x, y))
        .collect();
    DenseTensor::new(a.rows(), a.cols(), values).expect("shapes agree")
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    tape: u64,
    shapes: Vec<[usize; 2]>,
    grads: Vec<Option<DenseTensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` does not influence
    /// the loss.
    pub fn get(&self, v: Var) -> Result<DenseTensor> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(Error::Usage(format!(
                "variable {v:?} was not recorded on this tape"
            )));
        }
        Ok(self.grads[v.index].clone().unwrap_or_else(|| {
            let [r, c] = self.shapes[v.index];
            DenseTensor::zeros(r, c)
        }))
    }
}
