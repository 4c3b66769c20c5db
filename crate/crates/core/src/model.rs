//! The assembled detector: encoders, the two consistency stages, aggregation,
//! and prediction heads, wired according to a set of branch toggles.
//!
//! Each toggle removes one branch's parameters outright rather than masking
//! its output, so parameter counts shrink and the all-off configuration *is*
//! the reduced model: plain attention pooling over encoder outputs feeding
//! the heads, plus a per-token grounding head for text localisation.
//!
//! Token grounding keeps one uniform convention either way: the model always
//! exposes per-token consistency scores (1 = looks genuine). With the text
//! semantic branch on, they are the cross-modal scores; with it off, they
//! are 1 − sigmoid(grounding logit), which makes the grounding head's
//! cross-entropy exactly the semantic slot's loss and lets the same
//! threshold filter, sweep, and metrics serve both shapes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contextual::ContextualProcessor;
use crate::encoder::{Encoders, ModalityInput};
use crate::error::{Error, Result};
use crate::heads::{Heads, LossBreakdown, PredictionNodes, SampleTargets};
use crate::nn::Mlp;
use crate::params::ParamStore;
use crate::real::Real;
use crate::semantic::{threshold_filter, ForgeryAwareAggregator, GlobalAggregator, SemanticScorer};
use crate::synth::MediaPair;
use crate::tape::Graph;

/// Which consistency branches exist. `true` = the branch is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchToggles {
    pub contextual_image: bool,
    pub contextual_text: bool,
    pub semantic_image: bool,
    pub semantic_text: bool,
}

impl BranchToggles {
    pub fn all_on() -> Self {
        BranchToggles {
            contextual_image: true,
            contextual_text: true,
            semantic_image: true,
            semantic_text: true,
        }
    }

    pub fn all_off() -> Self {
        BranchToggles {
            contextual_image: false,
            contextual_text: false,
            semantic_image: false,
            semantic_text: false,
        }
    }
}

/// Structural hyper-parameters of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub raw_dim_image: usize,
    pub raw_dim_text: usize,
    pub dim: usize,
    pub encoder_depth: usize,
    pub co_layers: usize,
    pub processor_depth: usize,
    pub k_image: usize,
    pub k_text: usize,
    pub tau: f64,
    /// Swap the order of the two reasoning steps in the contextual stage.
    pub suspicious_first: bool,
    pub toggles: BranchToggles,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.dim % 2 != 0 {
            return Err(Error::Validation(format!(
                "model width must be even and >= 2, got {}",
                self.dim
            )));
        }
        if self.raw_dim_image == 0 || self.raw_dim_text == 0 {
            return Err(Error::Validation("raw feature widths must be positive".into()));
        }
        if self.k_image == 0 || self.k_text == 0 {
            return Err(Error::Validation("selection sizes must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Validation(format!(
                "threshold must lie strictly inside (0,1), got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Typed handles to every component; values live in the parameter store.
#[derive(Debug)]
pub struct Arch {
    pub encoders: Encoders,
    pub ctx_image: Option<ContextualProcessor>,
    pub ctx_text: Option<ContextualProcessor>,
    /// Global embedding of the image rows — exists to score text tokens.
    pub image_global: Option<GlobalAggregator>,
    /// Global embedding of the text rows — exists to score image patches.
    pub text_global: Option<GlobalAggregator>,
    pub image_scorer: Option<SemanticScorer>,
    pub text_scorer: Option<SemanticScorer>,
    pub image_agg: ForgeryAwareAggregator,
    pub text_agg: ForgeryAwareAggregator,
    /// Per-token manipulation head, built only without the text semantic branch.
    pub grounding: Option<Mlp>,
    pub heads: Heads,
}

/// Everything the evaluation and analysis paths need from one forward pass,
/// read out of the graph as plain values.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub binary_logit: f64,
    pub binary_prob: f64,
    pub type_logits: [f64; 4],
    pub type_probs: [f64; 4],
    pub bbox: [f64; 4],
    /// n×n patch consistency matrix, when the branch exists.
    pub m_pat: Option<Vec<f64>>,
    /// m×m token consistency matrix.
    pub m_tok: Option<Vec<f64>>,
    /// n patch-vs-text-global scores.
    pub s_pat: Option<Vec<f64>>,
    /// Per-token consistency scores (uniform convention, always present).
    pub token_scores: Vec<f64>,
    pub token_flags: Vec<bool>,
    /// Fine-grained rows the heads consumed (n×d and m×d, flattened).
    pub fine_image: Vec<f64>,
    pub fine_text: Vec<f64>,
    pub image_aggregate: Vec<f64>,
    pub text_aggregate: Vec<f64>,
}

/// The model: a parameter store plus the architecture built over it.
#[derive(Debug)]
pub struct Model<R: Real> {
    pub store: ParamStore<R>,
    pub arch: Arch,
    pub spec: ModelSpec,
}

impl<R: Real> Model<R> {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = spec.dim;
        let t = spec.toggles;

        // Construction order is fixed; every branch draws from the same RNG
        // stream, so a given (spec, seed) always yields the same bytes.
        let encoders = Encoders::new(
            &mut store,
            &mut rng,
            spec.raw_dim_image,
            spec.raw_dim_text,
            d,
            spec.encoder_depth,
            spec.co_layers,
        )?;
        let ctx_image = t
            .contextual_image
            .then(|| {
                ContextualProcessor::new(
                    &mut store,
                    &mut rng,
                    "ctx.img",
                    d,
                    spec.processor_depth,
                    spec.k_image,
                    spec.suspicious_first,
                )
            })
            .transpose()?;
        let ctx_text = t
            .contextual_text
            .then(|| {
                ContextualProcessor::new(
                    &mut store,
                    &mut rng,
                    "ctx.txt",
                    d,
                    spec.processor_depth,
                    spec.k_text,
                    spec.suspicious_first,
                )
            })
            .transpose()?;
        let image_global = t
            .semantic_text
            .then(|| GlobalAggregator::new(&mut store, &mut rng, "glob.img", d))
            .transpose()?;
        let text_global = t
            .semantic_image
            .then(|| GlobalAggregator::new(&mut store, &mut rng, "glob.txt", d))
            .transpose()?;
        let image_scorer = t
            .semantic_image
            .then(|| SemanticScorer::new(&mut store, &mut rng, "sem.img", d))
            .transpose()?;
        let text_scorer = t
            .semantic_text
            .then(|| SemanticScorer::new(&mut store, &mut rng, "sem.txt", d))
            .transpose()?;
        let image_agg = ForgeryAwareAggregator::new(
            &mut store,
            &mut rng,
            "agg.img",
            d,
            spec.k_image,
            t.semantic_image,
        )?;
        let text_agg = ForgeryAwareAggregator::new(
            &mut store,
            &mut rng,
            "agg.txt",
            d,
            spec.k_text,
            t.semantic_text,
        )?;
        let grounding = (!t.semantic_text)
            .then(|| Mlp::new(&mut store, &mut rng, "ground", &[d, d, 1]))
            .transpose()?;
        let heads = Heads::new(&mut store, &mut rng, "heads", d)?;

        Ok(Model {
            store,
            arch: Arch {
                encoders,
                ctx_image,
                ctx_text,
                image_global,
                text_global,
                image_scorer,
                text_scorer,
                image_agg,
                text_agg,
                grounding,
                heads,
            },
            spec,
        })
    }

    pub fn param_count(&self) -> usize {
        let a = &self.arch;
        a.encoders.param_count()
            + a.ctx_image.as_ref().map_or(0, ContextualProcessor::param_count)
            + a.ctx_text.as_ref().map_or(0, ContextualProcessor::param_count)
            + a.image_global.as_ref().map_or(0, GlobalAggregator::param_count)
            + a.text_global.as_ref().map_or(0, GlobalAggregator::param_count)
            + a.image_scorer.as_ref().map_or(0, SemanticScorer::param_count)
            + a.text_scorer.as_ref().map_or(0, SemanticScorer::param_count)
            + a.image_agg.param_count()
            + a.text_agg.param_count()
            + a.grounding.as_ref().map_or(0, Mlp::param_count)
            + a.heads.param_count()
    }

    /// Closed-form count assembled from every component's documented formula.
    pub fn expected_param_count(spec: &ModelSpec) -> usize {
        let d = spec.dim;
        let t = spec.toggles;
        let mut total = Encoders::expected_param_count(
            spec.raw_dim_image,
            spec.raw_dim_text,
            d,
            spec.encoder_depth,
            spec.co_layers,
        );
        let ctx = ContextualProcessor::expected_param_count(d, spec.processor_depth);
        if t.contextual_image {
            total += ctx;
        }
        if t.contextual_text {
            total += ctx;
        }
        let global = d + 2 * (d * d + d); // query + [d,d,d] MLP
        let scorer = 2 * (d * d + d); // φ
        let agg_plain = d; // pooling query
        let agg_reason = d + 2 * (4 * d * d); // query + two reasoning blocks
        if t.semantic_text {
            total += global + scorer + agg_reason;
        } else {
            total += agg_plain + (d * d + d) + (d + 1); // grounding [d,d,1]
        }
        if t.semantic_image {
            total += global + scorer + agg_reason;
        } else {
            total += agg_plain;
        }
        total + Heads::expected_param_count(d)
    }

    /// Run the full graph for one pair. Returns the in-graph prediction
    /// nodes (for loss assembly) and the value-space trace.
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p, R>,
        pair: &MediaPair,
    ) -> Result<(PredictionNodes, ForwardTrace)> {
        wire_forward(&self.arch, self.spec.tau, g, pair)
    }

    /// Loss and gradient for a single pair: one fresh graph, one backward
    /// sweep. The returned gradient is flat, aligned with the store.
    pub fn sample_gradient(
        &self,
        pair: &MediaPair,
        weights: [f64; 5],
    ) -> Result<(LossBreakdown, Vec<R>)> {
        let mut g = Graph::new(&self.store);
        let (preds, _) = self.forward(&mut g, pair)?;
        let targets = SampleTargets::from_pair(pair);
        let (total, breakdown) = crate::heads::subtask_losses(&mut g, &preds, &targets, weights)?;
        let grads = g.backward(total)?;
        Ok((breakdown, grads))
    }

    /// Loss only (no backward), for validation-style passes.
    pub fn sample_loss(&self, pair: &MediaPair, weights: [f64; 5]) -> Result<LossBreakdown> {
        let mut g = Graph::new(&self.store);
        let (preds, _) = self.forward(&mut g, pair)?;
        let targets = SampleTargets::from_pair(pair);
        let (_, breakdown) = crate::heads::subtask_losses(&mut g, &preds, &targets, weights)?;
        Ok(breakdown)
    }

    /// Value-space trace only, for evaluation.
    pub fn trace(&self, pair: &MediaPair) -> Result<ForwardTrace> {
        let mut g = Graph::new(&self.store);
        let (_, trace) = self.forward(&mut g, pair)?;
        Ok(trace)
    }
}

/// The full forward wiring as a free function over the architecture and an
/// already-open graph. [`Model::forward`] delegates here; finite-difference
/// checks call it directly so the parameter store can be perturbed while the
/// architecture is borrowed separately.
pub fn wire_forward<R: Real>(
    arch: &Arch,
    tau: f64,
    g: &mut Graph<'_, R>,
    pair: &MediaPair,
) -> Result<(PredictionNodes, ForwardTrace)> {
    let image_in = ModalityInput::dense(pair.patch_tensor::<R>())?;
    let text_in = ModalityInput::new(pair.token_tensor::<R>(), pair.token_mask())?;
    let enc = arch.encoders.forward(g, &image_in, &text_in)?;
    let all_patches = vec![true; g.shape(enc.v_pat).0];
    let token_mask = enc.text_mask.clone();

    // Contextual stage (either side optional): processed rows feed the
    // matrix loss, refined rows feed everything downstream.
    let (m_pat, fine_image) = match &arch.ctx_image {
        Some(proc) => {
            let (_, matrix, refined) = proc.forward(g, enc.v_pat, &all_patches)?;
            (Some(matrix), refined)
        }
        None => (None, enc.v_pat),
    };
    let (m_tok, fine_text) = match &arch.ctx_text {
        Some(proc) => {
            let (_, matrix, refined) = proc.forward(g, enc.t_tok, &token_mask)?;
            (Some(matrix), refined)
        }
        None => (None, enc.t_tok),
    };

    // Semantic stage. Each side scores its fine rows against the other
    // side's global embedding, then aggregates with those scores.
    let text_global = match &arch.text_global {
        Some(aggr) => Some(aggr.aggregate(g, fine_text, Some(&token_mask))?),
        None => None,
    };
    let image_global = match &arch.image_global {
        Some(aggr) => Some(aggr.aggregate(g, fine_image, None)?),
        None => None,
    };
    let s_pat = match (&arch.image_scorer, text_global) {
        (Some(scorer), Some(tg)) => Some(scorer.scores(g, fine_image, tg)?),
        _ => None,
    };
    let s_tok = match (&arch.text_scorer, image_global) {
        (Some(scorer), Some(ig)) => Some(scorer.scores(g, fine_text, ig)?),
        _ => {
            // Reduced form: per-token manipulation logits, re-expressed
            // as consistency so downstream stays uniform.
            match &arch.grounding {
                Some(head) => {
                    let logits = head.apply(g, fine_text)?;
                    let prob = g.sigmoid(logits)?;
                    let m = g.shape(prob).0;
                    let ones = g.constant_f64(m, 1, &vec![1.0; m])?;
                    let neg = g.scale(prob, -1.0)?;
                    Some(g.add(ones, neg)?)
                }
                None => None,
            }
        }
    };

    let s_pat_vals = s_pat.map(|n| g.value_f64(n));
    let s_tok_vals = s_tok.map(|n| g.value_f64(n));
    let v_agg = arch.image_agg.aggregate(g, fine_image, None, s_pat_vals.as_deref())?;
    let t_agg = arch
        .text_agg
        .aggregate(g, fine_text, Some(&token_mask), s_tok_vals.as_deref())?;

    let binary_logit = arch.heads.binary_head(g, enc.v_cls, enc.t_cls)?;
    let (bbox, img_types) = arch.heads.image_head(g, v_agg)?;
    let txt_types = arch.heads.text_head(g, t_agg)?;
    let type_logits = g.concat_cols(img_types, txt_types)?;

    let preds = PredictionNodes {
        binary_logit,
        bbox,
        type_logits,
        m_pat,
        m_tok,
        s_pat,
        s_tok,
    };

    let token_scores = s_tok_vals.clone().unwrap_or_else(|| vec![1.0; token_mask.len()]);
    let token_flags = threshold_filter(&token_scores, &token_mask, tau);
    let logit_val = g.value_f64(binary_logit)[0];
    let tl = g.value_f64(type_logits);
    let bb = g.value_f64(bbox);
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let trace = ForwardTrace {
        binary_logit: logit_val,
        binary_prob: sigmoid(logit_val),
        type_logits: [tl[0], tl[1], tl[2], tl[3]],
        type_probs: [sigmoid(tl[0]), sigmoid(tl[1]), sigmoid(tl[2]), sigmoid(tl[3])],
        bbox: [bb[0], bb[1], bb[2], bb[3]],
        m_pat: preds.m_pat.map(|n| g.value_f64(n)),
        m_tok: preds.m_tok.map(|n| g.value_f64(n)),
        s_pat: s_pat_vals,
        token_scores,
        token_flags,
        fine_image: g.value_f64(fine_image),
        fine_text: g.value_f64(fine_text),
        image_aggregate: g.value_f64(v_agg),
        text_aggregate: g.value_f64(t_agg),
    };
    Ok((preds, trace))
}
