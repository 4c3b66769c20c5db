//! Reverse-mode autodiff over 2-D tensors.
//!
//! A `Graph` is a write-once tape: builder methods evaluate eagerly (so the
//! caller can inspect intermediate values mid-construction, e.g. to pick
//! attention index sets from scores) and record enough to run `backward`
//! from a scalar root. Gradients come back as one flat vector aligned with
//! the `ParamStore` layout.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::{gemm_into, Real};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;
const COSINE_EPS: f64 = 1e-8;
const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    /// A @ B^T with both operands stored row-major.
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Broadcast a 1 x n row onto every row of the left operand.
    AddRow(NodeId, NodeId),
    Scale(NodeId, R),
    Gelu(NodeId),
    Sigmoid(NodeId),
    /// Row-wise softmax; masked columns got probability zero at forward
    /// time, so backward needs no mask (their output is exactly 0).
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    GatherRows(NodeId, Arc<Vec<usize>>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(NodeId, NodeId),
    /// Zero out rows whose keep flag is false.
    ZeroRows(NodeId, Arc<Vec<bool>>),
    /// n x n matrix of (cos(row_i, row_j) + 1) / 2.
    CosineGram(NodeId),
    /// n x 1 column of (cos(row_i, g) + 1) / 2 against a single row g.
    CosineAgainst(NodeId, NodeId),
    /// Per-query attention restricted to an explicit key index set.
    GatheredAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        sets: Arc<Vec<Vec<usize>>>,
        probs: Vec<Vec<R>>,
    },
    /// Mean binary cross-entropy on probabilities (clamped away from 0/1).
    BceMean {
        p: NodeId,
        target: Arc<Vec<f64>>,
        valid: Option<Arc<Vec<bool>>>,
    },
    /// Mean binary cross-entropy on logits (numerically stable form).
    BceLogitsMean {
        z: NodeId,
        target: Arc<Vec<f64>>,
    },
    L1Mean {
        p: NodeId,
        target: Arc<Vec<f64>>,
    },
    /// 1 - GIoU between a predicted box and a fixed target, both cx cy w h.
    GiouLoss {
        p: NodeId,
        target: [f64; 4],
    },
    SumAll(NodeId),
}

#[derive(Debug)]
struct Node<R> {
    rows: usize,
    cols: usize,
    data: Arc<Vec<R>>,
    op: Op<R>,
}

pub struct Graph<'p, R: Real> {
    store: &'p ParamStore<R>,
    nodes: Vec<Node<R>>,
    param_memo: Vec<Option<NodeId>>,
}

impl<'p, R: Real> Graph<'p, R> {
    pub fn new(store: &'p ParamStore<R>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_memo: vec![None; store.count()],
        }
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[R] {
        &self.nodes[id.0].data
    }

    pub fn value_f64(&self, id: NodeId) -> Vec<f64> {
        self.value(id).iter().map(|v| v.cast_f64()).collect()
    }

    pub fn scalar(&self, id: NodeId) -> Result<R> {
        let n = &self.nodes[id.0];
        if (n.rows, n.cols) != (1, 1) {
            return Err(Error::Shape(format!(
                "expected scalar node, got {}x{}",
                n.rows, n.cols
            )));
        }
        Ok(n.data[0])
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<R>, op: Op<R>, what: &str) -> Result<NodeId> {
        debug_assert_eq!(data.len(), rows * cols);
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value {v} from {what}")));
        }
        self.nodes.push(Node {
            rows,
            cols,
            data: Arc::new(data),
            op,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: &Tensor<R>) -> NodeId {
        self.nodes.push(Node {
            rows: t.rows(),
            cols: t.cols(),
            data: t.shared(),
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant_from(&mut self, rows: usize, cols: usize, data: Vec<R>) -> Result<NodeId> {
        self.push(rows, cols, data, Op::Leaf, "constant")
    }

    pub fn constant_f64(&mut self, rows: usize, cols: usize, data: &[f64]) -> Result<NodeId> {
        let cast: Vec<R> = data.iter().map(|&v| R::cast_from(v)).collect();
        self.push(rows, cols, cast, Op::Leaf, "constant")
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_memo[id.0] {
            return n;
        }
        let t = self.store.tensor(id);
        self.nodes.push(Node {
            rows: t.rows(),
            cols: t.cols(),
            data: t.shared(),
            op: Op::Param(id),
        });
        let node = NodeId(self.nodes.len() - 1);
        self.param_memo[id.0] = Some(node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::Shape(format!("matmul {m}x{ka} @ {kb}x{n}")));
        }
        let mut out = vec![R::zero(); m * n];
        gemm_into(m, ka, n, self.value(a), false, self.value(b), false, R::zero(), &mut out);
        self.push(m, n, out, Op::MatMul(a, b), "matmul")
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, da) = self.shape(a);
        let (n, db) = self.shape(b);
        if da != db {
            return Err(Error::Shape(format!("matmul_nt {m}x{da} @ ({n}x{db})^T")));
        }
        let mut out = vec![R::zero(); m * n];
        gemm_into(m, da, n, self.value(a), false, self.value(b), true, R::zero(), &mut out);
        self.push(m, n, out, Op::MatMulNT(a, b), "matmul_nt")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape(a);
        if (ra, ca) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add {ra}x{ca} vs {:?}",
                self.shape(b)
            )));
        }
        let out: Vec<R> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(ra, ca, out, Op::Add(a, b), "add")
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(Error::Shape(format!(
                "add_row wants 1x{n}, got {:?}",
                self.shape(row)
            )));
        }
        let r = self.value(row).to_vec();
        let out: Vec<R> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % n])
            .collect();
        self.push(m, n, out, Op::AddRow(a, row), "add_row")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let cr = R::cast_from(c);
        let out: Vec<R> = self.value(a).iter().map(|&x| x * cr).collect();
        self.push(m, n, out, Op::Scale(a, cr), "scale")
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let out: Vec<R> = self.value(a).iter().map(|&x| gelu_fwd(x)).collect();
        self.push(m, n, out, Op::Gelu(a), "gelu")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let out: Vec<R> = self.value(a).iter().map(|&x| sigmoid_fwd(x)).collect();
        self.push(m, n, out, Op::Sigmoid(a), "sigmoid")
    }

    /// Row-wise softmax. `mask`, when given, marks which columns are live
    /// keys; masked columns get probability exactly zero. Errors if no
    /// column is live.
    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if let Some(ms) = mask {
            if ms.len() != n {
                return Err(Error::Shape(format!(
                    "softmax mask len {} vs {n} columns",
                    ms.len()
                )));
            }
            if !ms.iter().any(|&b| b) {
                return Err(Error::EmptyAttentionSupport);
            }
        }
        let x = self.value(a);
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let live = |j: usize| mask.map_or(true, |ms| ms[j]);
            let mut hi = R::neg_infinity();
            for j in 0..n {
                if live(j) && row[j] > hi {
                    hi = row[j];
                }
            }
            let mut sum = R::zero();
            for j in 0..n {
                if live(j) {
                    let e = (row[j] - hi).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        self.push(m, n, out, Op::SoftmaxRows(a), "softmax")
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(x);
        if self.shape(gamma) != (1, n) || self.shape(beta) != (1, n) {
            return Err(Error::Shape("layer_norm scale/shift must be 1 x cols".into()));
        }
        let eps = R::cast_from(LAYER_NORM_EPS);
        let nr = R::cast_from(n as f64);
        let xv = self.value(x);
        let g = self.value(gamma).to_vec();
        let b = self.value(beta).to_vec();
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mut mu = R::zero();
            for &v in row {
                mu += v;
            }
            mu /= nr;
            let mut var = R::zero();
            for &v in row {
                var += (v - mu) * (v - mu);
            }
            var /= nr;
            let inv = (var + eps).sqrt().recip();
            for j in 0..n {
                out[i * n + j] = g[j] * (row[j] - mu) * inv + b[j];
            }
        }
        self.push(m, n, out, Op::LayerNorm { x, gamma, beta }, "layer_norm")
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Shape(format!("gather row {bad} from {m} rows")));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        self.push(idx.len(), n, out, Op::GatherRows(a, Arc::new(idx.to_vec())), "gather_rows")
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of nothing".into()));
        }
        let (_, n) = self.shape(parts[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != n {
                return Err(Error::Shape(format!("concat_rows width {c} vs {n}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        self.push(rows, n, out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ca) = self.shape(a);
        let (mb, cb) = self.shape(b);
        if m != mb {
            return Err(Error::Shape(format!("concat_cols rows {m} vs {mb}")));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(m * (ca + cb));
        for i in 0..m {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        self.push(m, ca + cb, out, Op::ConcatCols(a, b), "concat_cols")
    }

    pub fn zero_rows(&mut self, a: NodeId, keep: &[bool]) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if keep.len() != m {
            return Err(Error::Shape(format!("zero_rows keep len {} vs {m}", keep.len())));
        }
        let x = self.value(a);
        let mut out = x.to_vec();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                out[i * n..(i + 1) * n].fill(R::zero());
            }
        }
        self.push(m, n, out, Op::ZeroRows(a, Arc::new(keep.to_vec())), "zero_rows")
    }

    /// Pairwise similarity matrix with entries (cos + 1) / 2 in [0, 1].
    /// Row norms are floored at a small epsilon instead of adding it, so
    /// the diagonal is exactly 1 for any non-degenerate row.
    pub fn cosine_gram(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, d) = self.shape(a);
        let x = self.value(a);
        let norms = row_norms(x, m, d);
        let mut out = vec![R::zero(); m * m];
        let half = R::cast_from(0.5);
        for i in 0..m {
            for j in 0..=i {
                let mut dot = R::zero();
                for t in 0..d {
                    dot += x[i * d + t] * x[j * d + t];
                }
                let c = dot / (norms[i] * norms[j]);
                let v = clamp01((c + R::one()) * half);
                out[i * m + j] = v;
                out[j * m + i] = v;
            }
        }
        self.push(m, m, out, Op::CosineGram(a), "cosine_gram")
    }

    /// Column of (cos(row_i, g) + 1) / 2 against a single reference row.
    pub fn cosine_against(&mut self, a: NodeId, g: NodeId) -> Result<NodeId> {
        let (m, d) = self.shape(a);
        if self.shape(g) != (1, d) {
            return Err(Error::Shape(format!(
                "cosine_against reference must be 1x{d}, got {:?}",
                self.shape(g)
            )));
        }
        let x = self.value(a);
        let gv = self.value(g);
        let norms = row_norms(x, m, d);
        let gn = row_norms(gv, 1, d)[0];
        let half = R::cast_from(0.5);
        let mut out = vec![R::zero(); m];
        for i in 0..m {
            let mut dot = R::zero();
            for t in 0..d {
                dot += x[i * d + t] * gv[t];
            }
            out[i] = clamp01((dot / (norms[i] * gn) + R::one()) * half);
        }
        self.push(m, 1, out, Op::CosineAgainst(a, g), "cosine_against")
    }

    /// Attention where query row i attends only to `sets[i]` key rows.
    /// Scores are scaled by 1/sqrt(d). Errors on an empty set.
    pub fn gathered_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        sets: &[Vec<usize>],
    ) -> Result<NodeId> {
        let (nq, d) = self.shape(q);
        let (nk, dk) = self.shape(k);
        let (nv, dv) = self.shape(v);
        if d != dk || nk != nv {
            return Err(Error::Shape(format!(
                "gathered_attention q {nq}x{d}, k {nk}x{dk}, v {nv}x{dv}"
            )));
        }
        if sets.len() != nq {
            return Err(Error::Shape(format!(
                "gathered_attention has {nq} queries but {} index sets",
                sets.len()
            )));
        }
        let scale = R::cast_from(1.0 / (d as f64).sqrt());
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut out = vec![R::zero(); nq * dv];
        let mut probs = Vec::with_capacity(nq);
        for (i, set) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::EmptyAttentionSupport);
            }
            if let Some(&bad) = set.iter().find(|&&j| j >= nk) {
                return Err(Error::Shape(format!("attention key {bad} out of {nk}")));
            }
            let mut logits: Vec<R> = set
                .iter()
                .map(|&j| {
                    let mut dot = R::zero();
                    for t in 0..d {
                        dot += qv[i * d + t] * kv[j * d + t];
                    }
                    dot * scale
                })
                .collect();
            let hi = logits.iter().cloned().fold(R::neg_infinity(), R::max);
            let mut sum = R::zero();
            for l in logits.iter_mut() {
                *l = (*l - hi).exp();
                sum += *l;
            }
            for l in logits.iter_mut() {
                *l /= sum;
            }
            for (p, &j) in logits.iter().zip(set) {
                for t in 0..dv {
                    out[i * dv + t] += *p * vv[j * dv + t];
                }
            }
            probs.push(logits);
        }
        self.push(
            nq,
            dv,
            out,
            Op::GatheredAttention {
                q,
                k,
                v,
                sets: Arc::new(sets.to_vec()),
                probs,
            },
            "gathered_attention",
        )
    }

    /// Mean of -[t ln p + (1-t) ln(1-p)] over valid entries, with p clamped
    /// away from 0 and 1.
    pub fn bce_mean(
        &mut self,
        p: NodeId,
        target: &[f64],
        valid: Option<&[bool]>,
    ) -> Result<NodeId> {
        let (m, n) = self.shape(p);
        if target.len() != m * n {
            return Err(Error::Shape(format!(
                "bce target len {} vs {} predictions",
                target.len(),
                m * n
            )));
        }
        if let Some(vs) = valid {
            if vs.len() != m * n {
                return Err(Error::Shape("bce valid mask length".into()));
            }
        }
        let count = valid.map_or(m * n, |vs| vs.iter().filter(|&&b| b).count());
        if count == 0 {
            return Err(Error::Validation("loss over zero valid entries".into()));
        }
        let lo = R::cast_from(BCE_CLAMP);
        let hi = R::one() - lo;
        let mut acc = R::zero();
        for (i, &pv) in self.value(p).iter().enumerate() {
            if valid.map_or(true, |vs| vs[i]) {
                let pc = pv.max(lo).min(hi);
                let t = R::cast_from(target[i]);
                acc -= t * pc.ln() + (R::one() - t) * (R::one() - pc).ln();
            }
        }
        let out = acc / R::cast_from(count as f64);
        self.push(
            1,
            1,
            vec![out],
            Op::BceMean {
                p,
                target: Arc::new(target.to_vec()),
                valid: valid.map(|vs| Arc::new(vs.to_vec())),
            },
            "bce_mean",
        )
    }

    /// Mean BCE on raw logits via the stable max(z,0) - z t + ln(1+e^-|z|).
    pub fn bce_logits_mean(&mut self, z: NodeId, target: &[f64]) -> Result<NodeId> {
        let (m, n) = self.shape(z);
        if target.len() != m * n {
            return Err(Error::Shape("bce_logits target length".into()));
        }
        if target.is_empty() {
            return Err(Error::Validation("loss over zero entries".into()));
        }
        let mut acc = R::zero();
        for (i, &zv) in self.value(z).iter().enumerate() {
            let t = R::cast_from(target[i]);
            acc += zv.max(R::zero()) - zv * t + (R::one() + (-zv.abs()).exp()).ln();
        }
        let out = acc / R::cast_from(target.len() as f64);
        self.push(
            1,
            1,
            vec![out],
            Op::BceLogitsMean {
                z,
                target: Arc::new(target.to_vec()),
            },
            "bce_logits_mean",
        )
    }

    pub fn l1_mean(&mut self, p: NodeId, target: &[f64]) -> Result<NodeId> {
        let (m, n) = self.shape(p);
        if target.len() != m * n {
            return Err(Error::Shape("l1 target length".into()));
        }
        if target.is_empty() {
            return Err(Error::Validation("loss over zero entries".into()));
        }
        let mut acc = R::zero();
        for (i, &pv) in self.value(p).iter().enumerate() {
            acc += (pv - R::cast_from(target[i])).abs();
        }
        let out = acc / R::cast_from(target.len() as f64);
        self.push(
            1,
            1,
            vec![out],
            Op::L1Mean {
                p,
                target: Arc::new(target.to_vec()),
            },
            "l1_mean",
        )
    }

    /// 1 - GIoU of a predicted box against a fixed target, both as
    /// normalized center x, center y, width, height. Lies in [0, 2].
    pub fn giou_loss(&mut self, p: NodeId, target: [f64; 4]) -> Result<NodeId> {
        if self.shape(p) != (1, 4) {
            return Err(Error::Shape(format!(
                "giou_loss wants a 1x4 box, got {:?}",
                self.shape(p)
            )));
        }
        let pv = self.value(p);
        let pb = [pv[0], pv[1], pv[2], pv[3]];
        let tb = [
            R::cast_from(target[0]),
            R::cast_from(target[1]),
            R::cast_from(target[2]),
            R::cast_from(target[3]),
        ];
        let (loss, _) = giou_loss_fwd(pb, tb);
        self.push(1, 1, vec![loss], Op::GiouLoss { p, target }, "giou_loss")
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let mut acc = R::zero();
        for &v in self.value(a) {
            acc += v;
        }
        self.push(1, 1, vec![acc], Op::SumAll(a), "sum_all")
    }

    /// Runs reverse-mode accumulation from a scalar root. Returns the
    /// gradient as a flat vector aligned with the parameter store.
    pub fn backward(&self, root: NodeId) -> Result<Vec<R>> {
        let rn = &self.nodes[root.0];
        if (rn.rows, rn.cols) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {}x{}",
                rn.rows, rn.cols
            )));
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![R::one()]);
        let mut flat = vec![R::zero(); self.store.flat_len()];

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    let off = self.store.offset(*pid);
                    for (i, gv) in g.iter().enumerate() {
                        flat[off + i] += *gv;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let (_, n) = self.shape(*b);
                    {
                        let da = grad_buf(&mut grads, *a, m * k);
                        gemm_into(m, n, k, &g, false, self.value(*b), true, R::one(), da);
                    }
                    {
                        let db = grad_buf(&mut grads, *b, k * n);
                        gemm_into(k, m, n, self.value(*a), true, &g, false, R::one(), db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (m, d) = self.shape(*a);
                    let (n, _) = self.shape(*b);
                    {
                        let da = grad_buf(&mut grads, *a, m * d);
                        gemm_into(m, n, d, &g, false, self.value(*b), false, R::one(), da);
                    }
                    {
                        let db = grad_buf(&mut grads, *b, n * d);
                        gemm_into(n, m, d, &g, true, self.value(*a), false, R::one(), db);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *a, &g);
                    let (_, n) = self.shape(*a);
                    let dr = grad_buf(&mut grads, *row, n);
                    for (i, gv) in g.iter().enumerate() {
                        dr[i % n] += *gv;
                    }
                }
                Op::Scale(a, c) => {
                    let da = grad_buf(&mut grads, *a, g.len());
                    for (d, gv) in da.iter_mut().zip(&g) {
                        *d += *gv * *c;
                    }
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let da = grad_buf(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * gelu_bwd(x[i]);
                    }
                }
                Op::Sigmoid(a) => {
                    let s = &node.data;
                    let da = grad_buf(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * s[i] * (R::one() - s[i]);
                    }
                }
                Op::SoftmaxRows(a) => {
                    // dX = S (.) (dY - rowdot(dY, S)); masked entries have
                    // S = 0 so their gradient vanishes automatically.
                    let (m, n) = (node.rows, node.cols);
                    let s = &node.data;
                    let da = grad_buf(&mut grads, *a, m * n);
                    for i in 0..m {
                        let mut dot = R::zero();
                        for j in 0..n {
                            dot += g[i * n + j] * s[i * n + j];
                        }
                        for j in 0..n {
                            da[i * n + j] += s[i * n + j] * (g[i * n + j] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (m, n) = (node.rows, node.cols);
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let eps = R::cast_from(LAYER_NORM_EPS);
                    let nr = R::cast_from(n as f64);
                    let mut dgamma = vec![R::zero(); n];
                    let mut dbeta = vec![R::zero(); n];
                    {
                        let dx = grad_buf(&mut grads, *x, m * n);
                        for i in 0..m {
                            let row = &xv[i * n..(i + 1) * n];
                            let mut mu = R::zero();
                            for &v in row {
                                mu += v;
                            }
                            mu /= nr;
                            let mut var = R::zero();
                            for &v in row {
                                var += (v - mu) * (v - mu);
                            }
                            var /= nr;
                            let inv = (var + eps).sqrt().recip();
                            let mut mean_h = R::zero();
                            let mut mean_hx = R::zero();
                            for j in 0..n {
                                let xh = (row[j] - mu) * inv;
                                let h = gv[j] * g[i * n + j];
                                mean_h += h;
                                mean_hx += h * xh;
                                dgamma[j] += g[i * n + j] * xh;
                                dbeta[j] += g[i * n + j];
                            }
                            mean_h /= nr;
                            mean_hx /= nr;
                            for j in 0..n {
                                let xh = (row[j] - mu) * inv;
                                let h = gv[j] * g[i * n + j];
                                dx[i * n + j] += inv * (h - mean_h - xh * mean_hx);
                            }
                        }
                    }
                    accumulate(&mut grads, *gamma, &dgamma);
                    accumulate(&mut grads, *beta, &dbeta);
                }
                Op::GatherRows(a, idx) => {
                    let (_, n) = self.shape(*a);
                    let (rows_a, _) = self.shape(*a);
                    let da = grad_buf(&mut grads, *a, rows_a * n);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            da[i * n + j] += g[k * n + j];
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let n = node.cols;
                    let mut row = 0;
                    for &p in parts {
                        let (r, _) = self.shape(p);
                        let dp = grad_buf(&mut grads, p, r * n);
                        for (d, gv) in dp.iter_mut().zip(&g[row * n..(row + r) * n]) {
                            *d += *gv;
                        }
                        row += r;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (m, ca) = self.shape(*a);
                    let (_, cb) = self.shape(*b);
                    {
                        let da = grad_buf(&mut grads, *a, m * ca);
                        for i in 0..m {
                            for j in 0..ca {
                                da[i * ca + j] += g[i * (ca + cb) + j];
                            }
                        }
                    }
                    {
                        let db = grad_buf(&mut grads, *b, m * cb);
                        for i in 0..m {
                            for j in 0..cb {
                                db[i * cb + j] += g[i * (ca + cb) + ca + j];
                            }
                        }
                    }
                }
                Op::ZeroRows(a, keep) => {
                    let (m, n) = (node.rows, node.cols);
                    let da = grad_buf(&mut grads, *a, m * n);
                    for i in 0..m {
                        if keep[i] {
                            for j in 0..n {
                                da[i * n + j] += g[i * n + j];
                            }
                        }
                    }
                }
                Op::CosineGram(a) => {
                    // Entry (i,j) = entry (j,i) as a function, so row i
                    // collects weight from both transposed positions.
                    let (m, d) = self.shape(*a);
                    let x = self.value(*a);
                    let norms = row_norms(x, m, d);
                    let raw = raw_row_norms(x, m, d);
                    let half = R::cast_from(0.5);
                    let da = grad_buf(&mut grads, *a, m * d);
                    for i in 0..m {
                        for j in 0..m {
                            if i == j {
                                continue; // diagonal is constant 1
                            }
                            let w = (g[i * m + j] + g[j * m + i]) * half;
                            if w == R::zero() {
                                continue;
                            }
                            let mut dot = R::zero();
                            for t in 0..d {
                                dot += x[i * d + t] * x[j * d + t];
                            }
                            let c = dot / (norms[i] * norms[j]);
                            let live_i = raw[i] > R::cast_from(COSINE_EPS);
                            for t in 0..d {
                                let mut dv = x[j * d + t] / (norms[i] * norms[j]);
                                if live_i {
                                    dv -= c * x[i * d + t] / (norms[i] * norms[i]);
                                }
                                da[i * d + t] += w * dv;
                            }
                        }
                    }
                }
                Op::CosineAgainst(a, gref) => {
                    let (m, d) = self.shape(*a);
                    let x = self.value(*a);
                    let gv = self.value(*gref);
                    let norms = row_norms(x, m, d);
                    let raw = raw_row_norms(x, m, d);
                    let gn = row_norms(gv, 1, d)[0];
                    let graw = raw_row_norms(gv, 1, d)[0];
                    let live_g = graw > R::cast_from(COSINE_EPS);
                    let half = R::cast_from(0.5);
                    let mut dg = vec![R::zero(); d];
                    {
                        let da = grad_buf(&mut grads, *a, m * d);
                        for i in 0..m {
                            let w = g[i] * half;
                            if w == R::zero() {
                                continue;
                            }
                            let mut dot = R::zero();
                            for t in 0..d {
                                dot += x[i * d + t] * gv[t];
                            }
                            let c = dot / (norms[i] * gn);
                            let live_i = raw[i] > R::cast_from(COSINE_EPS);
                            for t in 0..d {
                                let mut dv = gv[t] / (norms[i] * gn);
                                if live_i {
                                    dv -= c * x[i * d + t] / (norms[i] * norms[i]);
                                }
                                da[i * d + t] += w * dv;
                                let mut dgv = x[i * d + t] / (norms[i] * gn);
                                if live_g {
                                    dgv -= c * gv[t] / (gn * gn);
                                }
                                dg[t] += w * dgv;
                            }
                        }
                    }
                    accumulate(&mut grads, *gref, &dg);
                }
                Op::GatheredAttention { q, k, v, sets, probs } => {
                    let (_, d) = self.shape(*q);
                    let (nk, _) = self.shape(*k);
                    let dv_cols = node.cols;
                    let qv = self.value(*q);
                    let kv = self.value(*k);
                    let vv = self.value(*v);
                    let scale = R::cast_from(1.0 / (d as f64).sqrt());
                    let mut dq = vec![R::zero(); qv.len()];
                    let mut dk = vec![R::zero(); kv.len()];
                    let mut dvv = vec![R::zero(); vv.len()];
                    for (i, set) in sets.iter().enumerate() {
                        let p = &probs[i];
                        // dP_j = g_i . v_j ; dlogit = P (.) (dP - sum P dP)
                        let mut dp: Vec<R> = set
                            .iter()
                            .map(|&j| {
                                let mut dot = R::zero();
                                for t in 0..dv_cols {
                                    dot += g[i * dv_cols + t] * vv[j * dv_cols + t];
                                }
                                dot
                            })
                            .collect();
                        let mut mix = R::zero();
                        for (pj, dpj) in p.iter().zip(&dp) {
                            mix += *pj * *dpj;
                        }
                        for (pj, dpj) in p.iter().zip(dp.iter_mut()) {
                            *dpj = *pj * (*dpj - mix);
                        }
                        for ((&j, pj), dlj) in set.iter().zip(p).zip(&dp) {
                            for t in 0..dv_cols {
                                dvv[j * dv_cols + t] += *pj * g[i * dv_cols + t];
                            }
                            for t in 0..d {
                                dq[i * d + t] += *dlj * scale * kv[j * d + t];
                                dk[j * d + t] += *dlj * scale * qv[i * d + t];
                            }
                        }
                    }
                    let _ = nk;
                    accumulate(&mut grads, *q, &dq);
                    accumulate(&mut grads, *k, &dk);
                    accumulate(&mut grads, *v, &dvv);
                }
                Op::BceMean { p, target, valid } => {
                    let pv = self.value(*p);
                    let count = valid
                        .as_ref()
                        .map_or(pv.len(), |vs| vs.iter().filter(|&&b| b).count());
                    let inv = R::cast_from(1.0 / count as f64);
                    let lo = R::cast_from(BCE_CLAMP);
                    let hi = R::one() - lo;
                    let da = grad_buf(&mut grads, *p, pv.len());
                    for i in 0..pv.len() {
                        if valid.as_ref().map_or(true, |vs| vs[i]) {
                            // Zero gradient where the clamp is active.
                            if pv[i] >= lo && pv[i] <= hi {
                                let t = R::cast_from(target[i]);
                                da[i] += g[0] * inv * (pv[i] - t) / (pv[i] * (R::one() - pv[i]));
                            }
                        }
                    }
                }
                Op::BceLogitsMean { z, target } => {
                    let zv = self.value(*z);
                    let inv = R::cast_from(1.0 / target.len() as f64);
                    let da = grad_buf(&mut grads, *z, zv.len());
                    for i in 0..zv.len() {
                        let t = R::cast_from(target[i]);
                        da[i] += g[0] * inv * (sigmoid_fwd(zv[i]) - t);
                    }
                }
                Op::L1Mean { p, target } => {
                    let pv = self.value(*p);
                    let inv = R::cast_from(1.0 / target.len() as f64);
                    let da = grad_buf(&mut grads, *p, pv.len());
                    for i in 0..pv.len() {
                        let diff = pv[i] - R::cast_from(target[i]);
                        let s = if diff > R::zero() {
                            R::one()
                        } else if diff < R::zero() {
                            -R::one()
                        } else {
                            R::zero()
                        };
                        da[i] += g[0] * inv * s;
                    }
                }
                Op::GiouLoss { p, target } => {
                    let pv = self.value(*p);
                    let pb = [pv[0], pv[1], pv[2], pv[3]];
                    let tb = [
                        R::cast_from(target[0]),
                        R::cast_from(target[1]),
                        R::cast_from(target[2]),
                        R::cast_from(target[3]),
                    ];
                    let (_, dbox) = giou_loss_fwd(pb, tb);
                    let da = grad_buf(&mut grads, *p, 4);
                    for t in 0..4 {
                        da[t] += g[0] * dbox[t];
                    }
                }
                Op::SumAll(a) => {
                    let (m, n) = self.shape(*a);
                    let da = grad_buf(&mut grads, *a, m * n);
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }

        if let Some(v) = flat.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient {v}")));
        }
        Ok(flat)
    }
}

fn grad_buf<R: Real>(grads: &mut [Option<Vec<R>>], id: NodeId, len: usize) -> &mut Vec<R> {
    grads[id.0].get_or_insert_with(|| vec![R::zero(); len])
}

fn accumulate<R: Real>(grads: &mut [Option<Vec<R>>], id: NodeId, g: &[R]) {
    let buf = grads[id.0].get_or_insert_with(|| vec![R::zero(); g.len()]);
    for (d, v) in buf.iter_mut().zip(g) {
        *d += *v;
    }
}

fn clamp01<R: Real>(v: R) -> R {
    v.max(R::zero()).min(R::one())
}

/// Euclidean row norms floored at the cosine epsilon.
fn row_norms<R: Real>(x: &[R], m: usize, d: usize) -> Vec<R> {
    let eps = R::cast_from(COSINE_EPS);
    (0..m)
        .map(|i| {
            let mut s = R::zero();
            for t in 0..d {
                s += x[i * d + t] * x[i * d + t];
            }
            s.sqrt().max(eps)
        })
        .collect()
}

fn raw_row_norms<R: Real>(x: &[R], m: usize, d: usize) -> Vec<R> {
    (0..m)
        .map(|i| {
            let mut s = R::zero();
            for t in 0..d {
                s += x[i * d + t] * x[i * d + t];
            }
            s.sqrt()
        })
        .collect()
}

fn gelu_fwd<R: Real>(x: R) -> R {
    let half = R::cast_from(0.5);
    let c = R::cast_from(0.044715);
    let k = R::cast_from((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + c * x * x * x);
    half * x * (R::one() + u.tanh())
}

fn gelu_bwd<R: Real>(x: R) -> R {
    let half = R::cast_from(0.5);
    let c = R::cast_from(0.044715);
    let three = R::cast_from(3.0);
    let k = R::cast_from((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (R::one() + three * c * x * x);
    half * (R::one() + t) + half * x * (R::one() - t * t) * du
}

fn sigmoid_fwd<R: Real>(x: R) -> R {
    if x >= R::zero() {
        (R::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

/// Forward value of 1 - GIoU plus its gradient with respect to the predicted
/// cx cy w h. Boxes are converted to corners internally; ties in the min/max
/// choices take the subgradient from the target side.
fn giou_loss_fwd<R: Real>(p: [R; 4], t: [R; 4]) -> (R, [R; 4]) {
    let two = R::cast_from(2.0);
    let half = R::cast_from(0.5);
    let (px1, py1, px2, py2) = (p[0] - p[2] / two, p[1] - p[3] / two, p[0] + p[2] / two, p[1] + p[3] / two);
    let (tx1, ty1, tx2, ty2) = (t[0] - t[2] / two, t[1] - t[3] / two, t[0] + t[2] / two, t[1] + t[3] / two);

    let pa = (px2 - px1) * (py2 - py1);
    let ta = (tx2 - tx1) * (ty2 - ty1);

    let ix1 = px1.max(tx1);
    let iy1 = py1.max(ty1);
    let ix2 = px2.min(tx2);
    let iy2 = py2.min(ty2);
    let iw = (ix2 - ix1).max(R::zero());
    let ih = (iy2 - iy1).max(R::zero());
    let inter = iw * ih;

    let cx1 = px1.min(tx1);
    let cy1 = py1.min(ty1);
    let cx2 = px2.max(tx2);
    let cy2 = py2.max(ty2);
    let cw = cx2 - cx1;
    let ch = cy2 - cy1;
    let cov = cw * ch;

    let uni = pa + ta - inter;
    let giou = inter / uni - (cov - uni) / cov;
    let loss = R::one() - giou;

    // d giou / d (inter, pa, cov); union = pa + ta - inter.
    let d_inter = (pa + ta) / (uni * uni) - cov.recip();
    let d_pa = -inter / (uni * uni) + cov.recip();
    let d_cov = -uni / (cov * cov);

    // Corner gradients.
    let live_w = iw > R::zero() && ih > R::zero();
    let g_iw = if live_w { d_inter * ih } else { R::zero() };
    let g_ih = if live_w { d_inter * iw } else { R::zero() };

    let mut d_px1 = -d_pa * (py2 - py1);
    let mut d_px2 = d_pa * (py2 - py1);
    let mut d_py1 = -d_pa * (px2 - px1);
    let mut d_py2 = d_pa * (px2 - px1);

    if px1 > tx1 {
        d_px1 -= g_iw;
    }
    if px2 < tx2 {
        d_px2 += g_iw;
    }
    if py1 > ty1 {
        d_py1 -= g_ih;
    }
    if py2 < ty2 {
        d_py2 += g_ih;
    }

    if px1 < tx1 {
        d_px1 -= d_cov * ch;
    }
    if px2 > tx2 {
        d_px2 += d_cov * ch;
    }
    if py1 < ty1 {
        d_py1 -= d_cov * cw;
    }
    if py2 > ty2 {
        d_py2 += d_cov * cw;
    }

    // Back to cx cy w h; loss = 1 - giou flips the sign.
    let d = [
        -(d_px1 + d_px2),
        -(d_py1 + d_py2),
        -(d_px2 - d_px1) * half,
        -(d_py2 - d_py1) * half,
    ];
    (loss, d)
}
