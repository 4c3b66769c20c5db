//! Neural building blocks composed from tape ops: linear layers, MLPs,
//! single-head attention with and without projections, pre-norm transformer
//! blocks, and the fixed sine-cosine positional table.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Graph, NodeId};

/// Scaled dot-product attention without any projections: softmax(QK^T/sqrt(d)) V.
/// `mask` marks which key rows are live; masked keys get zero weight.
pub fn attention<R: Real>(
    g: &mut Graph<R>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    let (_, d) = g.shape(q);
    if d == 0 {
        return Err(Error::Shape("attention over width-0 vectors".into()));
    }
    let logits = g.matmul_nt(q, k)?;
    let scaled = g.scale(logits, 1.0 / (d as f64).sqrt())?;
    let probs = g.softmax_rows(scaled, mask)?;
    g.matmul(probs, v)
}

/// Fixed sine-cosine positional table: row p, even column 2i holds
/// sin(p / 10000^(2i/d)), the following odd column holds the matching cos.
pub fn sincos_positional(n: usize, d: usize) -> Result<Vec<f64>> {
    if d % 2 != 0 {
        return Err(Error::Validation(format!(
            "positional width must be even, got {d}"
        )));
    }
    let mut out = vec![0.0; n * d];
    for p in 0..n {
        for i in 0..d / 2 {
            let rate = (p as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            out[p * d + 2 * i] = rate.sin();
            out[p * d + 2 * i + 1] = rate.cos();
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.xavier(rng, &format!("{name}.w"), in_dim, out_dim)?;
        let b = if bias {
            Some(store.zeros(&format!("{name}.b"), 1, out_dim)?)
        } else {
            None
        };
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn apply<R: Real>(&self, g: &mut Graph<R>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let bn = g.param(b);
                g.add_row(y, bn)
            }
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.b.is_some() { self.out_dim } else { 0 }
    }
}

/// Fully-connected stack with GELU between layers and a linear last layer.
#[derive(Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists input, hidden..., output widths, e.g. [64, 64, 1].
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        dims: &[usize],
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Validation("mlp needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            layers.push(Linear::new(
                store,
                rng,
                &format!("{name}.l{i}"),
                dims[i],
                dims[i + 1],
                true,
            )?);
        }
        Ok(Mlp { layers })
    }

    pub fn apply<R: Real>(&self, g: &mut Graph<R>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.gelu(h)?;
            }
        }
        Ok(h)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }
}

#[derive(Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.insert(
            &format!("{name}.gamma"),
            crate::tensor::Tensor::from_f64(1, dim, &vec![1.0; dim])?,
        )?;
        let beta = store.zeros(&format!("{name}.beta"), 1, dim)?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn apply<R: Real>(&self, g: &mut Graph<R>, x: NodeId) -> Result<NodeId> {
        let ga = g.param(self.gamma);
        let be = g.param(self.beta);
        g.layer_norm(x, ga, be)
    }

    pub fn param_count(&self, dim: usize) -> usize {
        2 * dim
    }
}

/// Single-head attention with learned (bias-free) q/k/v/output projections.
#[derive(Debug)]
pub struct AttnProj {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub dim: usize,
}

impl AttnProj {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
    ) -> Result<Self> {
        Ok(AttnProj {
            wq: Linear::new(store, rng, &format!("{name}.wq"), dim, dim, false)?,
            wk: Linear::new(store, rng, &format!("{name}.wk"), dim, dim, false)?,
            wv: Linear::new(store, rng, &format!("{name}.wv"), dim, dim, false)?,
            wo: Linear::new(store, rng, &format!("{name}.wo"), dim, dim, false)?,
            dim,
        })
    }

    /// Queries from `q_in`, keys/values from `kv_in` (same node for
    /// self-attention), softmax over unmasked keys.
    pub fn attend<R: Real>(
        &self,
        g: &mut Graph<R>,
        q_in: NodeId,
        kv_in: NodeId,
        mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let q = self.wq.apply(g, q_in)?;
        let k = self.wk.apply(g, kv_in)?;
        let v = self.wv.apply(g, kv_in)?;
        let y = attention(g, q, k, v, mask)?;
        self.wo.apply(g, y)
    }

    pub fn param_count(&self) -> usize {
        4 * self.dim * self.dim
    }
}

/// Pre-norm residual self-attention, no feed-forward half.
#[derive(Debug)]
pub struct AttnOnlyBlock {
    pub ln: LayerNorm,
    pub attn: AttnProj,
    dim: usize,
}

impl AttnOnlyBlock {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
    ) -> Result<Self> {
        Ok(AttnOnlyBlock {
            ln: LayerNorm::new(store, &format!("{name}.ln"), dim)?,
            attn: AttnProj::new(store, rng, &format!("{name}.attn"), dim)?,
            dim,
        })
    }

    pub fn apply<R: Real>(
        &self,
        g: &mut Graph<R>,
        x: NodeId,
        mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let normed = self.ln.apply(g, x)?;
        let att = self.attn.attend(g, normed, normed, mask)?;
        g.add(x, att)
    }

    pub fn param_count(&self) -> usize {
        self.ln.param_count(self.dim) + self.attn.param_count()
    }
}

/// Pre-norm residual cross-attention: queries from own stream, keys/values
/// from the other stream (separately normalized).
#[derive(Debug)]
pub struct CrossBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: AttnProj,
    dim: usize,
}

impl CrossBlock {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
    ) -> Result<Self> {
        Ok(CrossBlock {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), dim)?,
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), dim)?,
            attn: AttnProj::new(store, rng, &format!("{name}.attn"), dim)?,
            dim,
        })
    }

    pub fn apply<R: Real>(
        &self,
        g: &mut Graph<R>,
        x: NodeId,
        other: NodeId,
        other_mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let qn = self.ln_q.apply(g, x)?;
        let kvn = self.ln_kv.apply(g, other)?;
        let att = self.attn.attend(g, qn, kvn, other_mask)?;
        g.add(x, att)
    }

    pub fn param_count(&self) -> usize {
        self.ln_q.param_count(self.dim)
            + self.ln_kv.param_count(self.dim)
            + self.attn.param_count()
    }
}

/// Full pre-norm transformer block: self-attention then feed-forward,
/// both residual. The feed-forward hidden width equals the model width
/// (kept narrow deliberately at this scale).
#[derive(Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: AttnProj,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
    dim: usize,
}

impl TransformerBlock {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: AttnProj::new(store, rng, &format!("{name}.attn"), dim)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), &[dim, dim, dim])?,
            dim,
        })
    }

    pub fn apply<R: Real>(
        &self,
        g: &mut Graph<R>,
        x: NodeId,
        mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let n1 = self.ln1.apply(g, x)?;
        let att = self.attn.attend(g, n1, n1, mask)?;
        let x1 = g.add(x, att)?;
        let n2 = self.ln2.apply(g, x1)?;
        let ff = self.ffn.apply(g, n2)?;
        g.add(x1, ff)
    }

    pub fn param_count(&self) -> usize {
        self.ln1.param_count(self.dim)
            + self.attn.param_count()
            + self.ln2.param_count(self.dim)
            + self.ffn.param_count()
    }
}

/// Residual attention restricted to per-anchor index sets, with shared
/// projections: the building block of forgery-aware reasoning. Anchor row i
/// attends only to `sets[i]` rows of `source`.
#[derive(Debug)]
pub struct ReasonBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    dim: usize,
}

impl ReasonBlock {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
    ) -> Result<Self> {
        Ok(ReasonBlock {
            wq: Linear::new(store, rng, &format!("{name}.wq"), dim, dim, false)?,
            wk: Linear::new(store, rng, &format!("{name}.wk"), dim, dim, false)?,
            wv: Linear::new(store, rng, &format!("{name}.wv"), dim, dim, false)?,
            wo: Linear::new(store, rng, &format!("{name}.wo"), dim, dim, false)?,
            dim,
        })
    }

    pub fn apply<R: Real>(
        &self,
        g: &mut Graph<R>,
        anchors: NodeId,
        source: NodeId,
        sets: &[Vec<usize>],
    ) -> Result<NodeId> {
        let q = self.wq.apply(g, anchors)?;
        let k = self.wk.apply(g, source)?;
        let v = self.wv.apply(g, source)?;
        let y = g.gathered_attention(q, k, v, sets)?;
        let out = self.wo.apply(g, y)?;
        g.add(anchors, out)
    }

    pub fn param_count(&self) -> usize {
        4 * self.dim * self.dim
    }
}
