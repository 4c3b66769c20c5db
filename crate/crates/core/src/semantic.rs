//! Cross-modal semantic consistency: score each fine-grained row of one
//! modality against the other modality's global embedding, pool a global
//! summary that pays extra attention to the most and least consistent rows,
//! and turn low token scores into grounded manipulation flags.
//!
//! Each modality gets a global embedding: a single attention read with a
//! learned query over its fine rows, pushed through an MLP. A per-branch
//! projection φ then maps fine rows of one modality *and* the other
//! modality's global into a common scoring space; their cosines, rescaled to
//! [0,1], form the semantic score vector (1 = consistent with the other
//! modality, 0 = contradicts it). Rows ranked highest/lowest by that vector
//! drive a two-step residual refinement of the pooled summary, and for text
//! a strict `score < tau` test on valid tokens yields the grounding flags.

use rand::Rng;

use crate::contextual::SelectionResult;
use crate::error::{Error, Result};
use crate::nn::{attention, Mlp, ReasonBlock};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Graph, NodeId};

/// Per-row genuineness targets: 1 for untouched rows, 0 for manipulated ones.
pub fn semantic_gt(labels: &[u8]) -> Vec<f64> {
    labels.iter().map(|&l| 1.0 - l as f64).collect()
}

/// Rank rows by score: the k highest form the reliable set, the k lowest the
/// suspicious set. No anchor is excluded (the pooled query is not a row), so
/// k clamps to the number of valid rows. Ties prefer the lower index.
pub fn select_top_bottom(
    scores: &[f64],
    k: usize,
    valid: Option<&[bool]>,
) -> Result<SelectionResult> {
    if k == 0 {
        return Err(Error::Validation("selection needs k >= 1".into()));
    }
    let mut candidates: Vec<usize> = (0..scores.len())
        .filter(|&j| valid.map_or(true, |v| v[j]))
        .collect();
    if candidates.is_empty() {
        return Err(Error::NothingToSelect);
    }
    let take = k.min(candidates.len());
    candidates.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let reliable = candidates[..take].to_vec();
    candidates.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let suspicious = candidates[..take].to_vec();
    Ok(SelectionResult { reliable, suspicious })
}

/// Flag token i as manipulated iff its consistency score falls strictly
/// below `tau` and the token is valid. A score exactly at `tau` stays clean.
pub fn threshold_filter(scores: &[f64], mask: &[bool], tau: f64) -> Vec<bool> {
    scores
        .iter()
        .zip(mask.iter())
        .map(|(&s, &m)| m && s < tau)
        .collect()
}

/// One modality's global embedding: a learned query reads its fine rows
/// through bare attention, then an MLP reshapes the summary.
#[derive(Debug)]
pub struct GlobalAggregator {
    query: ParamId,
    pub mlp: Mlp,
    dim: usize,
}

impl GlobalAggregator {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
    ) -> Result<Self> {
        let query = store.gaussian(rng, &format!("{name}.query"), 1, dim, 0.02)?;
        let mlp = Mlp::new(store, rng, &format!("{name}.mlp"), &[dim, dim, dim])?;
        Ok(GlobalAggregator { query, mlp, dim })
    }

    /// Single attention read over `rows` (1×d output), then the MLP.
    pub fn aggregate<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        rows: NodeId,
        mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        if let Some(m) = mask {
            if !m.iter().any(|&v| v) {
                return Err(Error::EmptyAttentionSupport);
            }
        }
        let q = g.param(self.query);
        let read = attention(g, q, rows, rows, mask)?;
        self.mlp.apply(g, read)
    }

    pub fn param_count(&self) -> usize {
        self.dim + self.mlp.param_count()
    }
}

/// Scores one modality's fine rows against the other modality's global
/// embedding through a shared projection φ.
#[derive(Debug)]
pub struct SemanticScorer {
    pub phi: Mlp,
}

impl SemanticScorer {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
    ) -> Result<Self> {
        Ok(SemanticScorer {
            phi: Mlp::new(store, rng, &format!("{name}.phi"), &[dim, dim, dim])?,
        })
    }

    /// n×1 scores: ½(cos(φ(fine_i), φ(global)) + 1) per row. The same φ
    /// projects both sides.
    pub fn scores<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        fine: NodeId,
        global_other: NodeId,
    ) -> Result<NodeId> {
        let projected = self.phi.apply(g, fine)?;
        let reference = self.phi.apply(g, global_other)?;
        g.cosine_against(projected, reference)
    }

    pub fn param_count(&self) -> usize {
        self.phi.param_count()
    }
}

/// Pools a modality's fine rows into one vector with a learned query, then —
/// when reasoning blocks are present — refines the pool by attending over
/// the rows its semantic scores rank most reliable and most suspicious.
/// Construction without reasoning blocks (plain attention pooling) is the
/// reduced form used when the semantic branch is disabled.
#[derive(Debug)]
pub struct ForgeryAwareAggregator {
    query: ParamId,
    reason: Option<(ReasonBlock, ReasonBlock)>,
    pub k: usize,
    dim: usize,
}

impl ForgeryAwareAggregator {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        k: usize,
        with_reasoning: bool,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Validation("aggregation k must be >= 1".into()));
        }
        let query = store.gaussian(rng, &format!("{name}.query"), 1, dim, 0.02)?;
        let reason = if with_reasoning {
            Some((
                ReasonBlock::new(store, rng, &format!("{name}.rel"), dim)?,
                ReasonBlock::new(store, rng, &format!("{name}.sus"), dim)?,
            ))
        } else {
            None
        };
        Ok(ForgeryAwareAggregator { query, reason, k, dim })
    }

    /// Bare attention pooling of `fine` under the learned query.
    pub fn pool<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        fine: NodeId,
        mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        if let Some(m) = mask {
            if !m.iter().any(|&v| v) {
                return Err(Error::EmptyAttentionSupport);
            }
        }
        let q = g.param(self.query);
        attention(g, q, fine, fine, mask)
    }

    /// Pool, then (with reasoning blocks and scores available) fold in the
    /// k most and k least consistent rows as two residual attention steps.
    pub fn aggregate<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        fine: NodeId,
        mask: Option<&[bool]>,
        scores: Option<&[f64]>,
    ) -> Result<NodeId> {
        let pooled = self.pool(g, fine, mask)?;
        let (rel_block, sus_block) = match (&self.reason, scores) {
            (Some(pair), Some(_)) => (&pair.0, &pair.1),
            _ => return Ok(pooled),
        };
        let scores = scores.unwrap();
        let (n, _) = g.shape(fine);
        if scores.len() != n {
            return Err(Error::Shape(format!(
                "{} scores for {n} rows",
                scores.len()
            )));
        }
        let sel = select_top_bottom(scores, self.k, mask)?;
        let p1 = rel_block.apply(g, pooled, fine, &[sel.reliable])?;
        sus_block.apply(g, p1, fine, &[sel.suspicious])
    }

    pub fn param_count(&self) -> usize {
        self.dim
            + self
                .reason
                .as_ref()
                .map_or(0, |(a, b)| a.param_count() + b.param_count())
    }
}
