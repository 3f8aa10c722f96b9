//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! accumulates gradients into the owning [`ParamStore`].

use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{gemm_nt, gemm_tn, Scalar, Tensor};

/// Layer-norm epsilon inside the variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Block-structured key mask: `groups` rows of `len` entries each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqMask {
    pub groups: usize,
    pub len: usize,
    pub valid: Vec<bool>,
}

impl SeqMask {
    pub fn new(groups: usize, len: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != groups * len {
            return Err(Error::Shape(format!(
                "mask of {} entries for {groups}x{len}",
                valid.len()
            )));
        }
        Ok(SeqMask { groups, len, valid })
    }

    pub fn all_valid(groups: usize, len: usize) -> Self {
        SeqMask {
            groups,
            len,
            valid: vec![true; groups * len],
        }
    }

    pub fn group(&self, g: usize) -> &[bool] {
        &self.valid[g * self.len..(g + 1) * self.len]
    }

    pub fn valid_count(&self, g: usize) -> usize {
        self.group(g).iter().filter(|&&v| v).count()
    }

    fn check_nonempty(&self, what: &str) -> Result<()> {
        for g in 0..self.groups {
            if self.valid_count(g) == 0 {
                return Err(Error::DegenerateMask(format!(
                    "{what}: group {g} has no valid positions"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, F),
    Relu(NodeId),
    Dropout(NodeId, Vec<F>),
    Softmax {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    ConcatCols(Vec<NodeId>),
    SegmentMean {
        x: NodeId,
        mask: SeqMask,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        dims: AttentionDims,
        scale: F,
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Sum(NodeId),
}

/// Layout of a fused multi-head attention node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub head_dim: usize,
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor<F>) -> Result<NodeId> {
        self.push(value, Op::Input, "input")
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err("add", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let v = Tensor::new(x.shape().to_vec(), data)?;
        self.push(v, Op::Add(a, b), "add")
    }

    /// `x + row` with `row: 1 x n` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.row_broadcast(x, row, "add_row", |p, q| p + q)?;
        self.push(v, Op::AddRow(x, row), "add_row")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err("mul", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let v = Tensor::new(x.shape().to_vec(), data)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// `x * row` element-wise with `row: 1 x n` broadcast over the rows of `x`.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.row_broadcast(x, row, "mul_row", |p, q| p * q)?;
        self.push(v, Op::MulRow(x, row), "mul_row")
    }

    fn row_broadcast(
        &self,
        x: NodeId,
        row: NodeId,
        op: &'static str,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(dim_err(op, xv, rv));
        }
        let n = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &p)| f(p, rv.data()[i % n]))
            .collect();
        Tensor::new(xv.shape().to_vec(), data)
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> Result<NodeId> {
        let v = self.value(x).map(|p| p * s);
        self.push(v, Op::Scale(x, s), "scale")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|p| if p > F::zero() { p } else { F::zero() });
        self.push(v, Op::Relu(x), "relu")
    }

    /// Inverted dropout with a caller-supplied keep mask (entries 0 or 1/(1-rate)).
    pub fn dropout(&mut self, x: NodeId, keep_scale: Vec<F>) -> Result<NodeId> {
        let xv = self.value(x);
        if keep_scale.len() != xv.len() {
            return Err(Error::Shape("dropout mask length".into()));
        }
        let data = xv.data().iter().zip(&keep_scale).map(|(&p, &m)| p * m).collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(v, Op::Dropout(x, keep_scale), "dropout")
    }

    /// Row-wise softmax restricted to unmasked entries; masked entries are exactly 0.
    ///
    /// `mask`, when given, is row-major with the same shape as `x` (true = keep).
    pub fn softmax_masked(&mut self, x: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if let Some(mk) = &mask {
            if mk.len() != m * n {
                return Err(Error::Shape(format!("softmax mask {} for {m}x{n}", mk.len())));
            }
        }
        let mut out = vec![F::zero(); m * n];
        for r in 0..m {
            let row = &xv.data()[r * n..(r + 1) * n];
            let keep = mask.as_ref().map(|mk| &mk[r * n..(r + 1) * n]);
            softmax_row(row, keep, &mut out[r * n..(r + 1) * n])
                .map_err(|_| Error::DegenerateMask(format!("softmax row {r} fully masked")))?;
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(v, Op::Softmax { x }, "softmax")
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = (xv.rows(), xv.cols());
        if gv.len() != n || bv.len() != n {
            return Err(dim_err("layer_norm", xv, gv));
        }
        if n < 2 {
            return Err(Error::Shape("layer_norm needs at least 2 features".into()));
        }
        let nf = F::of(n as f64);
        let eps = F::of(LAYER_NORM_EPS);
        let mut xhat = vec![F::zero(); m * n];
        let mut rstd = vec![F::zero(); m];
        let mut out = vec![F::zero(); m * n];
        for r in 0..m {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let m = self.value(*first).rows();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(dim_err("concat_cols", self.value(*first), self.value(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let v = Tensor::matrix(m, total, out)?;
        self.push(v, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Mean over the valid rows of each group: `(groups*len) x n -> groups x n`.
    pub fn segment_mean(&mut self, x: NodeId, mask: &SeqMask) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rows() != mask.groups * mask.len {
            return Err(Error::Shape(format!(
                "segment_mean over {} rows with mask {}x{}",
                xv.rows(),
                mask.groups,
                mask.len
            )));
        }
        mask.check_nonempty("segment_mean")?;
        let n = xv.cols();
        let mut out = vec![F::zero(); mask.groups * n];
        for g in 0..mask.groups {
            let count = F::of(mask.valid_count(g) as f64);
            let acc = &mut out[g * n..(g + 1) * n];
            for t in 0..mask.len {
                if mask.valid[g * mask.len + t] {
                    for (a, &v) in acc.iter_mut().zip(xv.row_slice(g * mask.len + t)) {
                        *a = *a + v;
                    }
                }
            }
            acc.iter_mut().for_each(|a| *a = *a / count);
        }
        let v = Tensor::matrix(mask.groups, n, out)?;
        self.push(
            v,
            Op::SegmentMean {
                x,
                mask: mask.clone(),
            },
            "segment_mean",
        )
    }

    /// Fused scaled dot-product attention over `batch` independent sequences.
    ///
    /// `q` is `(batch*q_len) x (heads*head_dim)`, `k` and `v` are
    /// `(batch*k_len) x (heads*head_dim)`; head `h` owns column block `h`.
    /// `key_mask` is `batch x k_len`. Output has the layout of `q`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        key_mask: &SeqMask,
        scale: F,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        if heads == 0 || width % heads != 0 || kv.cols() != width || vv.cols() != width {
            return Err(dim_err("attention", qv, kv));
        }
        let batch = key_mask.groups;
        let k_len = key_mask.len;
        if kv.rows() != batch * k_len || vv.rows() != batch * k_len || qv.rows() % batch != 0 {
            return Err(dim_err("attention", qv, kv));
        }
        key_mask.check_nonempty("attention keys")?;
        let dims = AttentionDims {
            batch,
            heads,
            q_len: qv.rows() / batch,
            k_len,
            head_dim: width / heads,
        };
        let (probs, out) = attention_forward(qv.data(), kv.data(), vv.data(), &dims, key_mask, scale);
        let value = Tensor::matrix(qv.rows(), width, out)?;
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                dims,
                scale,
                probs,
            },
            "attention",
        )
    }

    /// Attention weights recorded by an attention node, laid out
    /// `[batch][head][query][key]`.
    pub fn attention_weights(&self, id: NodeId) -> Option<(&[F], AttentionDims)> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, dims, .. } => Some((probs, *dims)),
            _ => None,
        }
    }

    /// Mean cross-entropy of row-wise softmax(logits) against class ids.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (b, c) = (lv.rows(), lv.cols());
        if targets.len() != b {
            return Err(Error::Label(format!("{} targets for {b} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Label(format!("target {t} out of range for {c} classes")));
        }
        let mut probs = vec![F::zero(); b * c];
        let mut loss = F::zero();
        for r in 0..b {
            let row = &lv.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            loss = loss + (lse - row[targets[r]]);
        }
        let v = Tensor::scalar(loss / F::of(b as f64));
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).data().iter().copied().sum());
        self.push(v, Op::Sum(x), "sum")
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Parameter gradients are *added* to `store`; call
    /// [`ParamStore::zero_grad`] between steps. Running backward twice on the
    /// same graph therefore doubles the stored gradients.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<F>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    store.get_mut(*pid).grad.accumulate(&g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let ga = acc_slot(&mut grads, *a, m * k);
                    gemm_nt(&g, bv.data(), ga, m, n, k);
                    let gb = acc_slot(&mut grads, *b, k * n);
                    gemm_tn(av.data(), &g, gb, m, k, n);
                }
                Op::Add(a, b) => {
                    add_into(acc_slot(&mut grads, *a, g.len()), &g);
                    add_into(acc_slot(&mut grads, *b, g.len()), &g);
                }
                Op::AddRow(x, row) => {
                    let n = self.value(*row).cols();
                    add_into(acc_slot(&mut grads, *x, g.len()), &g);
                    let gr = acc_slot(&mut grads, *row, n);
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga = acc_slot(&mut grads, *a, g.len());
                    for ((d, &gi), &y) in ga.iter_mut().zip(&g).zip(bv) {
                        *d = *d + gi * y;
                    }
                    let gb = acc_slot(&mut grads, *b, g.len());
                    for ((d, &gi), &x) in gb.iter_mut().zip(&g).zip(av) {
                        *d = *d + gi * x;
                    }
                }
                Op::MulRow(x, row) => {
                    let (xv, rv) = (self.value(*x).data(), self.value(*row).data());
                    let n = rv.len();
                    let gx = acc_slot(&mut grads, *x, g.len());
                    for (i, (d, &gi)) in gx.iter_mut().zip(&g).enumerate() {
                        *d = *d + gi * rv[i % n];
                    }
                    let gr = acc_slot(&mut grads, *row, n);
                    for (i, (&gi, &xi)) in g.iter().zip(xv).enumerate() {
                        gr[i % n] = gr[i % n] + gi * xi;
                    }
                }
                Op::Scale(x, s) => {
                    let gx = acc_slot(&mut grads, *x, g.len());
                    for (d, &gi) in gx.iter_mut().zip(&g) {
                        *d = *d + gi * *s;
                    }
                }
                Op::Relu(x) => {
                    let out = node.value.data();
                    let gx = acc_slot(&mut grads, *x, g.len());
                    for ((d, &gi), &o) in gx.iter_mut().zip(&g).zip(out) {
                        if o > F::zero() {
                            *d = *d + gi;
                        }
                    }
                }
                Op::Dropout(x, keep) => {
                    let gx = acc_slot(&mut grads, *x, g.len());
                    for ((d, &gi), &m) in gx.iter_mut().zip(&g).zip(keep) {
                        *d = *d + gi * m;
                    }
                }
                Op::Softmax { x, .. } => {
                    let p = node.value.data();
                    let n = node.value.cols();
                    let gx = acc_slot(&mut grads, *x, g.len());
                    for ((prow, grow), drow) in p.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: F = prow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        for ((d, &pi), &gi) in drow.iter_mut().zip(prow).zip(grow) {
                            *d = *d + pi * (gi - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain).data();
                    let n = gv.len();
                    let nf = F::of(n as f64);
                    {
                        let gg = acc_slot(&mut grads, *gain, n);
                        for (hrow, grow) in xhat.chunks(n).zip(g.chunks(n)) {
                            for c in 0..n {
                                gg[c] = gg[c] + grow[c] * hrow[c];
                            }
                        }
                    }
                    {
                        let gb = acc_slot(&mut grads, *bias, n);
                        for grow in g.chunks(n) {
                            add_into(gb, grow);
                        }
                    }
                    let gx = acc_slot(&mut grads, *x, g.len());
                    let mut dh = vec![F::zero(); n];
                    for (r, ((hrow, grow), drow)) in xhat
                        .chunks(n)
                        .zip(g.chunks(n))
                        .zip(gx.chunks_mut(n))
                        .enumerate()
                    {
                        for c in 0..n {
                            dh[c] = grow[c] * gv[c];
                        }
                        let mean_dh = dh.iter().copied().sum::<F>() / nf;
                        let mean_dhh = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<F>() / nf;
                        for c in 0..n {
                            drow[c] = drow[c] + rstd[r] * (dh[c] - mean_dh - hrow[c] * mean_dhh);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let gp = acc_slot(&mut grads, p, g.len() / total * w);
                        for (r, drow) in gp.chunks_mut(w).enumerate() {
                            add_into(drow, &g[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                    }
                }
                Op::SegmentMean { x, mask } => {
                    let n = node.value.cols();
                    let gx = acc_slot(&mut grads, *x, mask.groups * mask.len * n);
                    for gi in 0..mask.groups {
                        let inv = F::one() / F::of(mask.valid_count(gi) as f64);
                        let grow = &g[gi * n..(gi + 1) * n];
                        for t in 0..mask.len {
                            let row = gi * mask.len + t;
                            if mask.valid[row] {
                                for (d, &v) in gx[row * n..(row + 1) * n].iter_mut().zip(grow) {
                                    *d = *d + v * inv;
                                }
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    dims,
                    scale,
                    probs,
                    ..
                } => {
                    let (dq, dk, dv) = attention_backward(
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        probs,
                        &g,
                        dims,
                        *scale,
                    );
                    add_into(acc_slot(&mut grads, *q, dq.len()), &dq);
                    add_into(acc_slot(&mut grads, *k, dk.len()), &dk);
                    add_into(acc_slot(&mut grads, *v, dv.len()), &dv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let b = targets.len();
                    let c = probs.len() / b;
                    let s = g[0] / F::of(b as f64);
                    let gl = acc_slot(&mut grads, *logits, b * c);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { F::one() } else { F::zero() };
                            gl[r * c + j] = gl[r * c + j] + s * (probs[r * c + j] - onehot);
                        }
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    let gx = acc_slot(&mut grads, *x, n);
                    gx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
        }
        Ok(())
    }
}

fn acc_slot<F: Scalar>(grads: &mut [Option<Vec<F>>], id: NodeId, len: usize) -> &mut [F] {
    grads[id.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Softmax of one row over the `keep` entries; fails when nothing is kept.
fn softmax_row<F: Scalar>(row: &[F], keep: Option<&[bool]>, out: &mut [F]) -> std::result::Result<(), ()> {
    let kept = |i: usize| keep.is_none_or(|k| k[i]);
    let mut max = F::neg_infinity();
    for (i, &v) in row.iter().enumerate() {
        if kept(i) && v > max {
            max = v;
        }
    }
    if max == F::neg_infinity() {
        return Err(());
    }
    let mut denom = F::zero();
    for (i, &v) in row.iter().enumerate() {
        if kept(i) {
            let e = (v - max).exp();
            out[i] = e;
            denom = denom + e;
        } else {
            out[i] = F::zero();
        }
    }
    for (i, o) in out.iter_mut().enumerate() {
        if kept(i) {
            *o = *o / denom;
        }
    }
    Ok(())
}

fn attention_forward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    d: &AttentionDims,
    mask: &SeqMask,
    scale: F,
) -> (Vec<F>, Vec<F>) {
    let width = d.heads * d.head_dim;
    let mut probs = vec![F::zero(); d.batch * d.heads * d.q_len * d.k_len];
    let mut out = vec![F::zero(); d.batch * d.q_len * width];
    let mut scores = vec![F::zero(); d.k_len];
    for b in 0..d.batch {
        let keep = mask.group(b);
        for h in 0..d.heads {
            let col = h * d.head_dim;
            for i in 0..d.q_len {
                let qrow = &q[(b * d.q_len + i) * width + col..][..d.head_dim];
                for j in 0..d.k_len {
                    scores[j] = if keep[j] {
                        let krow = &k[(b * d.k_len + j) * width + col..][..d.head_dim];
                        qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum::<F>() * scale
                    } else {
                        F::zero()
                    };
                }
                let p = &mut probs[((b * d.heads + h) * d.q_len + i) * d.k_len..][..d.k_len];
                softmax_row(&scores, Some(keep), p).expect("mask checked non-empty");
                let orow = &mut out[(b * d.q_len + i) * width + col..][..d.head_dim];
                for j in 0..d.k_len {
                    if keep[j] {
                        let vrow = &v[(b * d.k_len + j) * width + col..][..d.head_dim];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o = *o + p[j] * vv;
                        }
                    }
                }
            }
        }
    }
    (probs, out)
}

fn attention_backward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    g: &[F],
    d: &AttentionDims,
    scale: F,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let width = d.heads * d.head_dim;
    let mut dq = vec![F::zero(); q.len()];
    let mut dk = vec![F::zero(); k.len()];
    let mut dv = vec![F::zero(); v.len()];
    let mut dp = vec![F::zero(); d.k_len];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let col = h * d.head_dim;
            for i in 0..d.q_len {
                let qoff = (b * d.q_len + i) * width + col;
                let grow = &g[qoff..qoff + d.head_dim];
                let p = &probs[((b * d.heads + h) * d.q_len + i) * d.k_len..][..d.k_len];
                let mut dot = F::zero();
                for j in 0..d.k_len {
                    if p[j] == F::zero() {
                        dp[j] = F::zero();
                        continue;
                    }
                    let voff = (b * d.k_len + j) * width + col;
                    dp[j] = grow.iter().zip(&v[voff..voff + d.head_dim]).map(|(&x, &y)| x * y).sum();
                    dot = dot + p[j] * dp[j];
                    for (dvv, &gg) in dv[voff..voff + d.head_dim].iter_mut().zip(grow) {
                        *dvv = *dvv + p[j] * gg;
                    }
                }
                for j in 0..d.k_len {
                    if p[j] == F::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let koff = (b * d.k_len + j) * width + col;
                    for c in 0..d.head_dim {
                        dq[qoff + c] = dq[qoff + c] + ds * k[koff + c];
                        dk[koff + c] = dk[koff + c] + ds * q[qoff + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
