//! Intra-modality consistency: score every pair of rows in a sequence,
//! decide which neighbours look trustworthy and which look suspect, and
//! refine each row by attending over both groups.
//!
//! The pipeline per modality: a light positional refresh (fixed sinusoidal
//! rows pushed through a small MLP) plus a few attention-only blocks produce
//! a processed sequence; a shared projection φ maps its rows into a scoring
//! space whose pairwise cosines — rescaled to [0,1] — form the consistency
//! matrix; per anchor row the k best-scoring partners (anchor excluded)
//! become the reliable set, the k worst the suspicious set; two residual
//! attention steps fold first the reliable then the suspicious rows back
//! into the anchor. Selection reads score *values* only, so gradients flow
//! through the matrix solely via its own training loss.
//!
//! Pad rows are carried through numerically but excluded from pair validity,
//! selection, and every downstream read.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{sincos_positional, AttnOnlyBlock, Mlp, ReasonBlock};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tape::{Graph, NodeId};

/// Indices chosen for one anchor: best-scoring partners and worst-scoring
/// partners, each excluding the anchor itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionResult {
    pub reliable: Vec<usize>,
    pub suspicious: Vec<usize>,
}

/// Pairwise agreement targets: entry (i,j) is 1 when rows i and j carry the
/// same manipulation flag, 0 otherwise. Row-major n×n.
pub fn contextual_gt(labels: &[u8]) -> Vec<f64> {
    let n = labels.len();
    let mut gt = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            gt[i * n + j] = if labels[i] == labels[j] { 1.0 } else { 0.0 };
        }
    }
    gt
}

/// Row-major n×n indicator of pairs where both rows are valid (non-pad).
pub fn pair_validity(mask: &[bool]) -> Vec<bool> {
    let n = mask.len();
    let mut valid = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            valid[i * n + j] = mask[i] && mask[j];
        }
    }
    valid
}

/// Pick the k highest-scoring partners (reliable) and the k lowest-scoring
/// partners (suspicious) from one score row, excluding the anchor and any
/// invalid index. Ties prefer the lower index; k is clamped to the number of
/// candidates. Fails with "nothing to select" when no candidate remains.
pub fn select_reliable_suspicious(
    row: &[f64],
    anchor: usize,
    k: usize,
    valid: Option<&[bool]>,
) -> Result<SelectionResult> {
    if anchor >= row.len() {
        return Err(Error::Shape(format!(
            "anchor {anchor} out of range for row of {}",
            row.len()
        )));
    }
    if k == 0 {
        return Err(Error::Validation("selection needs k >= 1".into()));
    }
    let mut candidates: Vec<usize> = (0..row.len())
        .filter(|&j| j != anchor && valid.map_or(true, |v| v[j]))
        .collect();
    if candidates.is_empty() {
        return Err(Error::NothingToSelect);
    }
    let take = k.min(candidates.len());
    // Descending score, ascending index: the front is the reliable prefix
    // and the back (reversed to restore index order on equal scores) is the
    // suspicious prefix of the same ordering.
    candidates.sort_by(|&a, &b| {
        row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b))
    });
    let reliable = candidates[..take].to_vec();
    candidates.sort_by(|&a, &b| {
        row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b))
    });
    let suspicious = candidates[..take].to_vec();
    Ok(SelectionResult { reliable, suspicious })
}

/// One modality's consistency processor with its scoring projection and the
/// two reasoning attention blocks.
#[derive(Debug)]
pub struct ContextualProcessor {
    pos_mlp: Mlp,
    blocks: Vec<AttnOnlyBlock>,
    phi: Mlp,
    reliable_block: ReasonBlock,
    suspicious_block: ReasonBlock,
    pub k: usize,
    /// Apply the suspicious step before the reliable one (ablation toggle).
    pub suspicious_first: bool,
    dim: usize,
}

impl ContextualProcessor {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        depth: usize,
        k: usize,
        suspicious_first: bool,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Validation("contextual k must be >= 1".into()));
        }
        let pos_mlp = Mlp::new(store, rng, &format!("{name}.pos"), &[dim, dim, dim])?;
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            blocks.push(AttnOnlyBlock::new(store, rng, &format!("{name}.block{i}"), dim)?);
        }
        let phi = Mlp::new(store, rng, &format!("{name}.phi"), &[dim, dim, dim])?;
        let reliable_block = ReasonBlock::new(store, rng, &format!("{name}.rel"), dim)?;
        let suspicious_block = ReasonBlock::new(store, rng, &format!("{name}.sus"), dim)?;
        Ok(ContextualProcessor {
            pos_mlp,
            blocks,
            phi,
            reliable_block,
            suspicious_block,
            k,
            suspicious_first,
            dim,
        })
    }

    /// Positional refresh plus the attention-only stack. Invalid rows are
    /// excluded from every softmax so they cannot steer valid outputs.
    pub fn process<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        emb: NodeId,
        mask: &[bool],
    ) -> Result<NodeId> {
        let (n, d) = g.shape(emb);
        if d != self.dim {
            return Err(Error::Shape(format!(
                "sequence width {d} does not match processor width {}",
                self.dim
            )));
        }
        if mask.len() != n {
            return Err(Error::Shape(format!(
                "mask length {} does not match {n} rows",
                mask.len()
            )));
        }
        let table = sincos_positional(n, d)?;
        let table_node = g.constant_f64(n, d, &table)?;
        let pos = self.pos_mlp.apply(g, table_node)?;
        let mut x = g.add(emb, pos)?;
        let mask_opt = if mask.iter().any(|&v| !v) { Some(mask) } else { None };
        for block in &self.blocks {
            x = block.apply(g, x, mask_opt)?;
        }
        Ok(x)
    }

    /// Pairwise consistency scores of the processed rows: cosine of the
    /// φ-projected rows, affinely rescaled so agreement ↦ 1, opposition ↦ 0.
    pub fn matrix<R: Real>(&self, g: &mut Graph<'_, R>, seq: NodeId) -> Result<NodeId> {
        let projected = self.phi.apply(g, seq)?;
        g.cosine_gram(projected)
    }

    /// Refine each valid anchor row by attending first over its reliable
    /// partners, then over its suspicious ones (order flippable), with keys
    /// and values always drawn from the *original* processed sequence. Pad
    /// anchors fall back to a self-only support set; nothing downstream
    /// reads them.
    pub fn reason<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        seq: NodeId,
        scores: &[f64],
        mask: &[bool],
    ) -> Result<NodeId> {
        let (n, _) = g.shape(seq);
        if scores.len() != n * n {
            return Err(Error::Shape(format!(
                "score matrix has {} entries, expected {}",
                scores.len(),
                n * n
            )));
        }
        let mut reliable_sets = Vec::with_capacity(n);
        let mut suspicious_sets = Vec::with_capacity(n);
        for i in 0..n {
            if mask[i] {
                let sel =
                    select_reliable_suspicious(&scores[i * n..(i + 1) * n], i, self.k, Some(mask))?;
                reliable_sets.push(sel.reliable);
                suspicious_sets.push(sel.suspicious);
            } else {
                reliable_sets.push(vec![i]);
                suspicious_sets.push(vec![i]);
            }
        }
        let (first, second, first_sets, second_sets) = if self.suspicious_first {
            (&self.suspicious_block, &self.reliable_block, &suspicious_sets, &reliable_sets)
        } else {
            (&self.reliable_block, &self.suspicious_block, &reliable_sets, &suspicious_sets)
        };
        let step1 = first.apply(g, seq, seq, first_sets)?;
        second.apply(g, step1, seq, second_sets)
    }

    /// Full pass: process, score, and refine. Returns the processed
    /// sequence, the consistency matrix node, and the refined sequence.
    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        emb: NodeId,
        mask: &[bool],
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let processed = self.process(g, emb, mask)?;
        let matrix = self.matrix(g, processed)?;
        let scores = g.value_f64(matrix);
        let refined = self.reason(g, processed, &scores, mask)?;
        Ok((processed, matrix, refined))
    }

    pub fn param_count(&self) -> usize {
        self.pos_mlp.param_count()
            + self.blocks.iter().map(AttnOnlyBlock::param_count).sum::<usize>()
            + self.phi.param_count()
            + self.reliable_block.param_count()
            + self.suspicious_block.param_count()
    }

    /// Closed-form count: two [d,d,d] MLPs (positional, φ) at 2d²+2d each,
    /// `depth` attention-only blocks at 4d²+2d, two reasoning blocks at 4d².
    pub fn expected_param_count(dim: usize, depth: usize) -> usize {
        let d = dim;
        2 * (2 * d * d + 2 * d) + depth * (4 * d * d + 2 * d) + 2 * (4 * d * d)
    }
}
