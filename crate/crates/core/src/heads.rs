//! Prediction heads for the four sub-tasks and the assembly of the training
//! objective.
//!
//! The binary head reads the concatenated class embeddings; the image head
//! turns the aggregated image embedding into a sigmoid-bounded cxcywh box
//! plus two manipulation-type logits; the text head mirrors it with two
//! logits and no box. Types are multi-label (a pair can carry one image and
//! one text manipulation at once), so the four logits train as independent
//! binary targets ordered [FS, FA, TS, TA].
//!
//! Consistency supervision is plain clamped cross-entropy against the
//! derived pair/row targets, averaged per valid entry, with the image and
//! text terms summed. Box regression (mean absolute error plus a
//! generalized-overlap penalty) applies only to samples whose ground truth
//! actually contains a manipulated face. Token grounding carries no loss
//! head at all: it is supervised through the semantic term and decided by
//! the threshold filter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contextual::{contextual_gt, pair_validity};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::ParamStore;
use crate::real::Real;
use crate::semantic::semantic_gt;
use crate::synth::MediaPair;
use crate::tape::{Graph, NodeId};

/// Weighted loss components for one batch or sample. `weights` follows the
/// field order [binary, type, bbox, contextual, semantic]; `total` is their
/// weighted sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_binary: f64,
    pub l_type: f64,
    pub l_bbox: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub total: f64,
    pub weights: [f64; 5],
}

impl LossBreakdown {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.l_binary, self.l_type, self.l_bbox, self.l_c, self.l_s];
        for (i, &p) in parts.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::Numeric(format!("loss component {i} is {p}")));
            }
        }
        let expect: f64 = parts.iter().zip(self.weights.iter()).map(|(p, w)| p * w).sum();
        if !self.total.is_finite() || (self.total - expect).abs() > 1e-9 * (1.0 + expect.abs()) {
            return Err(Error::Numeric(format!(
                "total {} does not match weighted sum {expect}",
                self.total
            )));
        }
        Ok(())
    }
}

/// Ground truth for one pair, in the exact form the losses consume.
#[derive(Debug, Clone)]
pub struct SampleTargets {
    /// 1.0 when any manipulation is present.
    pub is_fake: f64,
    /// Ground-truth face box (cx, cy, w, h) when an image manipulation exists.
    pub face_box: Option<[f64; 4]>,
    /// Multi-label type targets ordered [FS, FA, TS, TA].
    pub type_targets: [f64; 4],
    /// Per-patch manipulation flags (row-major grid).
    pub patch_labels: Vec<u8>,
    /// Per-token manipulation flags (pads carry 0).
    pub token_labels: Vec<u8>,
    /// Token validity mask.
    pub token_mask: Vec<bool>,
}

impl SampleTargets {
    pub fn from_pair(pair: &MediaPair) -> Self {
        SampleTargets {
            is_fake: if pair.is_fake { 1.0 } else { 0.0 },
            face_box: pair.face_box,
            type_targets: pair.type_targets(),
            patch_labels: pair.patch_labels.clone(),
            token_labels: pair.token_labels.clone(),
            token_mask: pair.token_mask(),
        }
    }
}

/// Graph nodes produced by a forward pass, in the shape the losses expect.
/// Consistency nodes are optional so disabled branches simply contribute
/// nothing.
#[derive(Debug, Clone)]
pub struct PredictionNodes {
    /// 1×1 manipulation logit (positive = manipulated).
    pub binary_logit: NodeId,
    /// 1×4 sigmoid-bounded box (cx, cy, w, h).
    pub bbox: NodeId,
    /// 1×4 type logits ordered [FS, FA, TS, TA].
    pub type_logits: NodeId,
    /// n×n patch consistency scores.
    pub m_pat: Option<NodeId>,
    /// m×m token consistency scores.
    pub m_tok: Option<NodeId>,
    /// n×1 patch-vs-text-global scores.
    pub s_pat: Option<NodeId>,
    /// m×1 token-vs-image-global scores.
    pub s_tok: Option<NodeId>,
}

/// The three prediction heads.
#[derive(Debug)]
pub struct Heads {
    binary: Mlp,
    bbox: Mlp,
    img_type: Mlp,
    txt_type: Mlp,
    dim: usize,
}

impl Heads {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
    ) -> Result<Self> {
        Ok(Heads {
            binary: Mlp::new(store, rng, &format!("{name}.binary"), &[2 * dim, dim, 1])?,
            bbox: Mlp::new(store, rng, &format!("{name}.bbox"), &[dim, dim, 4])?,
            img_type: Mlp::new(store, rng, &format!("{name}.img_type"), &[dim, dim, 2])?,
            txt_type: Mlp::new(store, rng, &format!("{name}.txt_type"), &[dim, dim, 2])?,
            dim,
        })
    }

    /// Scalar manipulation logit from the concatenated class embeddings.
    pub fn binary_head<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        v_cls: NodeId,
        t_cls: NodeId,
    ) -> Result<NodeId> {
        for (node, label) in [(v_cls, "image"), (t_cls, "text")] {
            if g.shape(node) != (1, self.dim) {
                return Err(Error::Shape(format!(
                    "{label} class embedding is {:?}, expected 1x{}",
                    g.shape(node),
                    self.dim
                )));
            }
        }
        let joint = g.concat_cols(v_cls, t_cls)?;
        self.binary.apply(g, joint)
    }

    /// Box (sigmoid cxcywh) and the two image-type logits (FS, FA).
    pub fn image_head<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        v_a: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let raw = self.bbox.apply(g, v_a)?;
        let bbox = g.sigmoid(raw)?;
        let types = self.img_type.apply(g, v_a)?;
        Ok((bbox, types))
    }

    /// The two text-type logits (TS, TA).
    pub fn text_head<R: Real>(&self, g: &mut Graph<'_, R>, t_a: NodeId) -> Result<NodeId> {
        self.txt_type.apply(g, t_a)
    }

    pub fn param_count(&self) -> usize {
        self.binary.param_count()
            + self.bbox.param_count()
            + self.img_type.param_count()
            + self.txt_type.param_count()
    }

    /// Closed form: binary [2d,d,1] = 2d²+d+d+1, bbox [d,d,4] = d²+d+4d+4,
    /// each type head [d,d,2] = d²+d+2d+2.
    pub fn expected_param_count(dim: usize) -> usize {
        let d = dim;
        (2 * d * d + d + d + 1) + (d * d + d + 4 * d + 4) + 2 * (d * d + d + 2 * d + 2)
    }
}

/// Clamped cross-entropy between score predictions in [0,1] and binary
/// targets, averaged over valid entries.
pub fn consistency_loss<R: Real>(
    g: &mut Graph<'_, R>,
    pred: NodeId,
    gt: &[f64],
    valid: Option<&[bool]>,
) -> Result<NodeId> {
    g.bce_mean(pred, gt, valid)
}

/// Assemble every loss component into a weighted total. Returns the scalar
/// graph node (for backprop) together with the recorded breakdown.
pub fn subtask_losses<R: Real>(
    g: &mut Graph<'_, R>,
    preds: &PredictionNodes,
    tgt: &SampleTargets,
    weights: [f64; 5],
) -> Result<(NodeId, LossBreakdown)> {
    let l_binary = g.bce_logits_mean(preds.binary_logit, &[tgt.is_fake])?;
    let l_type = g.bce_logits_mean(preds.type_logits, &tgt.type_targets)?;

    let l_bbox = match tgt.face_box {
        Some(b) => {
            let l1 = g.l1_mean(preds.bbox, &b)?;
            let overlap = g.giou_loss(preds.bbox, b)?;
            g.add(l1, overlap)?
        }
        None => g.constant_f64(1, 1, &[0.0])?,
    };

    // Pairwise term: image entries are all valid; text entries only where
    // both tokens are real. Each present branch contributes its own mean.
    let mut l_c = g.constant_f64(1, 1, &[0.0])?;
    if let Some(m_pat) = preds.m_pat {
        let term = consistency_loss(g, m_pat, &contextual_gt(&tgt.patch_labels), None)?;
        l_c = g.add(l_c, term)?;
    }
    if let Some(m_tok) = preds.m_tok {
        let gt = contextual_gt(&tgt.token_labels);
        let valid = pair_validity(&tgt.token_mask);
        let term = consistency_loss(g, m_tok, &gt, Some(&valid))?;
        l_c = g.add(l_c, term)?;
    }

    let mut l_s = g.constant_f64(1, 1, &[0.0])?;
    if let Some(s_pat) = preds.s_pat {
        let term = consistency_loss(g, s_pat, &semantic_gt(&tgt.patch_labels), None)?;
        l_s = g.add(l_s, term)?;
    }
    if let Some(s_tok) = preds.s_tok {
        let gt = semantic_gt(&tgt.token_labels);
        let term = consistency_loss(g, s_tok, &gt, Some(&tgt.token_mask))?;
        l_s = g.add(l_s, term)?;
    }

    let parts = [l_binary, l_type, l_bbox, l_c, l_s];
    let mut total = g.constant_f64(1, 1, &[0.0])?;
    for (node, w) in parts.iter().zip(weights.iter()) {
        let scaled = g.scale(*node, *w)?;
        total = g.add(total, scaled)?;
    }

    // The recorded total is recomputed in f64 from the recorded components:
    // the graph's own total drives gradients, but in 32-bit mode it differs
    // from the component sum by rounding, and the record must stay internally
    // consistent. A non-finite loss is deliberately NOT an error here — the
    // training loop detects it and reports the offending batch with this
    // record as the diagnostic.
    let components = [
        g.value_f64(l_binary)[0],
        g.value_f64(l_type)[0],
        g.value_f64(l_bbox)[0],
        g.value_f64(l_c)[0],
        g.value_f64(l_s)[0],
    ];
    let breakdown = LossBreakdown {
        l_binary: components[0],
        l_type: components[1],
        l_bbox: components[2],
        l_c: components[3],
        l_s: components[4],
        total: components.iter().zip(&weights).map(|(c, w)| c * w).sum(),
        weights,
    };
    Ok((total, breakdown))
}
