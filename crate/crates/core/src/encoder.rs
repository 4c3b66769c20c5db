//! Stream encoders for the two modalities and the co-attention stack that
//! lets them exchange information.
//!
//! Each stream maps raw feature rows (patch vectors for the image, token
//! vectors for the text) into the shared model width, prepends a learned
//! class row, adds fixed sinusoidal position rows, and runs a small stack of
//! pre-norm transformer blocks. Text pads are zeroed right after projection
//! and excluded from every attention softmax, so nothing downstream can see
//! their raw contents.
//!
//! The co-attention stack then interleaves the streams: per layer, each
//! stream self-attends, cross-attends into the *other* stream's
//! self-attended rows (queries from its own rows, keys and values from the
//! other), and finishes with a feed-forward update — every step a pre-norm
//! residual. Both streams advance in lockstep; neither sees the other's
//! cross-attended result within the same layer. Class rows ride along like
//! any other row and are split off only at the very end.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{sincos_positional, AttnOnlyBlock, CrossBlock, LayerNorm, Linear, Mlp, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Graph, NodeId};
use crate::tensor::Tensor;

/// Raw per-item feature rows for one modality plus a validity mask
/// (`true` = real item, `false` = pad).
#[derive(Debug, Clone)]
pub struct ModalityInput<R: Real> {
    pub features: Tensor<R>,
    pub mask: Vec<bool>,
}

impl<R: Real> ModalityInput<R> {
    pub fn new(features: Tensor<R>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != features.rows() {
            return Err(Error::Shape(format!(
                "mask length {} does not match {} feature rows",
                mask.len(),
                features.rows(),
            )));
        }
        if !mask.iter().any(|&v| v) {
            return Err(Error::Validation("no valid items in modality input".into()));
        }
        Ok(ModalityInput { features, mask })
    }

    /// Input with every row valid (images are always dense).
    pub fn dense(features: Tensor<R>) -> Result<Self> {
        let mask = vec![true; features.rows()];
        Self::new(features, mask)
    }
}

/// Graph nodes for the encoded pair: class rows, fine-grained rows, and the
/// token validity mask carried through for downstream attention.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// 1×d image class embedding.
    pub v_cls: NodeId,
    /// 1×d text class embedding.
    pub t_cls: NodeId,
    /// n×d patch embeddings.
    pub v_pat: NodeId,
    /// m×d token embeddings (pad rows present but inert).
    pub t_tok: NodeId,
    /// Length-m token validity mask.
    pub text_mask: Vec<bool>,
}

/// One modality's encoder: projection, learned class row, fixed positions,
/// then `depth` transformer blocks.
#[derive(Debug)]
pub struct StreamEncoder {
    proj: Linear,
    class_token: ParamId,
    blocks: Vec<TransformerBlock>,
    dim: usize,
}

impl StreamEncoder {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        raw_dim: usize,
        dim: usize,
        depth: usize,
    ) -> Result<Self> {
        let proj = Linear::new(store, rng, &format!("{name}.proj"), raw_dim, dim, true)?;
        let class_token = store.gaussian(rng, &format!("{name}.class"), 1, dim, 0.02)?;
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            blocks.push(TransformerBlock::new(
                store,
                rng,
                &format!("{name}.block{i}"),
                dim,
            )?);
        }
        Ok(StreamEncoder { proj, class_token, blocks, dim })
    }

    /// Encode raw rows into an (items+1)×d matrix whose row 0 is the class
    /// embedding. The class row sits at position 0 of the sinusoidal table;
    /// item i sits at position i+1. Pad rows are zeroed before the class row
    /// is attached, so a pad's raw contents never reach any output.
    pub fn encode<R: Real>(&self, g: &mut Graph<'_, R>, input: &ModalityInput<R>) -> Result<NodeId> {
        if input.features.cols() != self.proj.in_dim {
            return Err(Error::Shape(format!(
                "raw feature width {} does not match projection input {}",
                input.features.cols(), self.proj.in_dim
            )));
        }
        let items = input.features.rows();
        let raw = g.constant(&input.features);
        let mut x = self.proj.apply(g, raw)?;
        let has_pads = input.mask.iter().any(|&v| !v);
        if has_pads {
            x = g.zero_rows(x, &input.mask)?;
        }
        let cls = g.param(self.class_token);
        x = g.concat_rows(&[cls, x])?;
        let pos = sincos_positional(items + 1, self.dim)?;
        let pos_node = g.constant_f64(items + 1, self.dim, &pos)?;
        x = g.add(x, pos_node)?;

        let full_mask = with_class_row(&input.mask);
        let mask_opt = if has_pads { Some(full_mask.as_slice()) } else { None };
        for block in &self.blocks {
            x = block.apply(g, x, mask_opt)?;
        }
        Ok(x)
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count()
            + self.dim
            + self.blocks.iter().map(TransformerBlock::param_count).sum::<usize>()
    }
}

/// One stream's share of a co-attention layer: self-attention, cross-attention
/// into the other stream, then a feed-forward update, all pre-norm residual.
#[derive(Debug)]
struct StreamLayer {
    selfa: AttnOnlyBlock,
    cross: CrossBlock,
    ffn_ln: LayerNorm,
    ffn: Mlp,
    dim: usize,
}

impl StreamLayer {
    fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
    ) -> Result<Self> {
        Ok(StreamLayer {
            selfa: AttnOnlyBlock::new(store, rng, &format!("{name}.self"), dim)?,
            cross: CrossBlock::new(store, rng, &format!("{name}.cross"), dim)?,
            ffn_ln: LayerNorm::new(store, &format!("{name}.ffn_ln"), dim)?,
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), &[dim, dim, dim])?,
            dim,
        })
    }

    fn feed_forward<R: Real>(&self, g: &mut Graph<'_, R>, x: NodeId) -> Result<NodeId> {
        let normed = self.ffn_ln.apply(g, x)?;
        let h = self.ffn.apply(g, normed)?;
        g.add(x, h)
    }

    fn param_count(&self) -> usize {
        self.selfa.param_count()
            + self.cross.param_count()
            + self.ffn_ln.param_count(self.dim)
            + self.ffn.param_count()
    }
}

#[derive(Debug)]
struct CoAttentionLayer {
    img: StreamLayer,
    txt: StreamLayer,
}

/// The full encoder pair plus the co-attention stack between them.
#[derive(Debug)]
pub struct Encoders {
    pub image: StreamEncoder,
    pub text: StreamEncoder,
    layers: Vec<CoAttentionLayer>,
    dim: usize,
}

impl Encoders {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        raw_dim_image: usize,
        raw_dim_text: usize,
        dim: usize,
        depth: usize,
        co_layers: usize,
    ) -> Result<Self> {
        let image = StreamEncoder::new(store, rng, "enc.img", raw_dim_image, dim, depth)?;
        let text = StreamEncoder::new(store, rng, "enc.txt", raw_dim_text, dim, depth)?;
        let mut layers = Vec::with_capacity(co_layers);
        for i in 0..co_layers {
            layers.push(CoAttentionLayer {
                img: StreamLayer::new(store, rng, &format!("co{i}.img"), dim)?,
                txt: StreamLayer::new(store, rng, &format!("co{i}.txt"), dim)?,
            });
        }
        Ok(Encoders { image, text, layers, dim })
    }

    pub fn encode_image<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        input: &ModalityInput<R>,
    ) -> Result<NodeId> {
        self.image.encode(g, input)
    }

    pub fn encode_text<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        input: &ModalityInput<R>,
    ) -> Result<NodeId> {
        self.text.encode(g, input)
    }

    /// Run the co-attention stack over already-encoded streams and split the
    /// class rows off. `img` is (n+1)×d, `txt` is (m+1)×d, `text_mask` has
    /// length m. With zero layers this is a pure split.
    pub fn interact<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        img: NodeId,
        txt: NodeId,
        text_mask: &[bool],
    ) -> Result<EncoderOutput> {
        let (img_rows, img_cols) = g.shape(img);
        let (txt_rows, txt_cols) = g.shape(txt);
        if img_cols != self.dim || txt_cols != self.dim {
            return Err(Error::Shape(format!(
                "stream widths {img_cols}/{txt_cols} do not match model width {}",
                self.dim
            )));
        }
        if txt_rows != text_mask.len() + 1 {
            return Err(Error::Shape(format!(
                "text has {txt_rows} rows but mask covers {} tokens",
                text_mask.len()
            )));
        }
        let txt_full = with_class_row(text_mask);
        let txt_mask_opt = if text_mask.iter().any(|&v| !v) {
            Some(txt_full.as_slice())
        } else {
            None
        };

        let mut v = img;
        let mut t = txt;
        for layer in &self.layers {
            // Both streams self-attend first; each then cross-attends into
            // the other's self-attended rows, so the exchange is symmetric.
            let v_self = layer.img.selfa.apply(g, v, None)?;
            let t_self = layer.txt.selfa.apply(g, t, txt_mask_opt)?;
            let v_crossed = layer.img.cross.apply(g, v_self, t_self, txt_mask_opt)?;
            let t_crossed = layer.txt.cross.apply(g, t_self, v_self, None)?;
            v = layer.img.feed_forward(g, v_crossed)?;
            t = layer.txt.feed_forward(g, t_crossed)?;
        }

        let v_cls = g.gather_rows(v, &[0])?;
        let t_cls = g.gather_rows(t, &[0])?;
        let v_pat = g.gather_rows(v, &(1..img_rows).collect::<Vec<_>>())?;
        let t_tok = g.gather_rows(t, &(1..txt_rows).collect::<Vec<_>>())?;
        Ok(EncoderOutput {
            v_cls,
            t_cls,
            v_pat,
            t_tok,
            text_mask: text_mask.to_vec(),
        })
    }

    /// Encode both modalities and run the interaction stack.
    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        image: &ModalityInput<R>,
        text: &ModalityInput<R>,
    ) -> Result<EncoderOutput> {
        let v = self.encode_image(g, image)?;
        let t = self.encode_text(g, text)?;
        self.interact(g, v, t, &text.mask)
    }

    pub fn param_count(&self) -> usize {
        self.image.param_count()
            + self.text.param_count()
            + self
                .layers
                .iter()
                .map(|l| l.img.param_count() + l.txt.param_count())
                .sum::<usize>()
    }

    /// Closed-form parameter count, kept in sync with the actual layout:
    ///
    /// ```text
    /// stream(r)  = r·d + d          projection weight + bias
    ///            + d                class row
    ///            + depth·(6d² + 6d) per block: 4d² attention, 2d² + 2d FFN,
    ///                               2·2d layer norms
    /// per layer  = 2·(10d² + 10d)   per stream: 4d² + 2d self-attention,
    ///                               4d² + 4d cross-attention, 2d² + 4d FFN
    /// total      = stream(raw_img) + stream(raw_txt) + layers·per_layer
    /// ```
    pub fn expected_param_count(
        raw_dim_image: usize,
        raw_dim_text: usize,
        dim: usize,
        depth: usize,
        co_layers: usize,
    ) -> usize {
        let d = dim;
        let stream = |raw: usize| raw * d + d + d + depth * (6 * d * d + 6 * d);
        let per_layer = 2 * (10 * d * d + 10 * d);
        stream(raw_dim_image) + stream(raw_dim_text) + co_layers * per_layer
    }
}

/// Prepend a `true` entry for the class row to an item mask.
fn with_class_row(mask: &[bool]) -> Vec<bool> {
    let mut full = Vec::with_capacity(mask.len() + 1);
    full.push(true);
    full.extend_from_slice(mask);
    full
}
