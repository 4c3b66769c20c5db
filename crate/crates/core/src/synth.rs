//! Synthetic paired-media corpus with planted manipulations and exact labels.
//!
//! Each sample is an image-text pair reduced to raw feature vectors: a g×g
//! grid of patch features and a padded token sequence, both `feature_dim`
//! wide. Feature columns are split into four blocks — source style, topic,
//! sentiment, residual noise — and manipulations are planted as distribution
//! shifts inside those blocks:
//!
//! * **FS** (face swap): a rectangular patch region is re-sourced (style mean
//!   shifted, jitter widened) and its topic block replaced wholesale.
//! * **FA** (face attribute): same re-sourcing, topic only mildly perturbed.
//! * **TS** (text swap): 30–60% of valid tokens get a foreign topic and a
//!   foreign text source.
//! * **TA** (text attribute): 10–30% of valid tokens get their sentiment
//!   component flipped against the rest of the sentence.
//!
//! Genuine pairs share one latent topic vector across both modalities, which
//! is what cross-modal consistency can latch onto. Ground truth — binary
//! label, type set, face box, per-token and per-patch labels — is exact by
//! construction. Generation is a pure function of the config (seed included):
//! every sample is built from its own counter-derived RNG, so sharding or
//! parallel generation cannot change the output.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par;
use crate::real::Real;
use crate::tensor::Tensor;

/// Distinct latent topics in the corpus.
const TOPIC_POOL: usize = 12;

/// Per-component jitter of genuine features around their block means.
const STYLE_JITTER: f64 = 0.3;
const TOPIC_JITTER: f64 = 0.25;
const SENT_JITTER: f64 = 0.2;
const NOISE_SCALE: f64 = 0.5;
/// Manipulated regions get their jitter widened by this factor.
const COV_SCALE: f64 = 1.5;

/// The four manipulation types, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ManipType {
    FS,
    FA,
    TS,
    TA,
}

impl ManipType {
    pub const ALL: [ManipType; 4] = [ManipType::FS, ManipType::FA, ManipType::TS, ManipType::TA];

    /// Position in the canonical FS, FA, TS, TA ordering (type-logit layout).
    pub fn index(self) -> usize {
        match self {
            ManipType::FS => 0,
            ManipType::FA => 1,
            ManipType::TS => 2,
            ManipType::TA => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ManipType::FS => "FS",
            ManipType::FA => "FA",
            ManipType::TS => "TS",
            ManipType::TA => "TA",
        }
    }

    pub fn is_image(self) -> bool {
        matches!(self, ManipType::FS | ManipType::FA)
    }
}

/// Column ranges of the four feature blocks within a raw feature vector.
#[derive(Clone, Debug)]
pub struct Subspaces {
    pub style: Range<usize>,
    pub topic: Range<usize>,
    pub sentiment: Range<usize>,
    pub noise: Range<usize>,
}

/// Splits `dim` columns into style (3/8), topic (3/8), sentiment (1/8, at
/// least one column) and noise (the remainder). Needs at least 8 columns so
/// every block is non-empty.
pub fn subspaces(dim: usize) -> Result<Subspaces> {
    if dim < 8 {
        return Err(Error::Validation(format!(
            "feature_dim must be at least 8 to fit all feature blocks, got {dim}"
        )));
    }
    let style = 3 * dim / 8;
    let topic = 3 * dim / 8;
    let senti = (dim / 8).max(1);
    Ok(Subspaces {
        style: 0..style,
        topic: style..style + topic,
        sentiment: style + topic..style + topic + senti,
        noise: style + topic + senti..dim,
    })
}

/// Everything that determines a generated corpus. Same config, same bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub train_count: usize,
    pub test_count: usize,
    /// Patch grid side length g (g² patches per image).
    pub grid: usize,
    /// Token sequence capacity; actual sentences vary in valid length.
    pub token_len: usize,
    /// Raw feature width of both patches and tokens.
    pub feature_dim: usize,
    /// Fraction of pairs left unmanipulated.
    pub genuine_fraction: f64,
    /// Relative weights of FS, FA, TS, TA for single-manipulation fakes.
    pub type_probs: [f64; 4],
    /// Fraction of fakes carrying both an image and a text manipulation.
    pub dual_fraction: f64,
    /// Style mean-shift magnitude planted into manipulated regions.
    pub source_shift: f64,
    /// Topic displacement magnitude of swapped content.
    pub topic_mismatch: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            train_count: 2000,
            test_count: 500,
            grid: 8,
            token_len: 16,
            feature_dim: 32,
            genuine_fraction: 0.337,
            type_probs: [0.25, 0.25, 0.25, 0.25],
            dual_fraction: 0.25,
            source_shift: 2.0,
            topic_mismatch: 1.5,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::Validation("split counts must be positive".into()));
        }
        if self.grid < 2 {
            return Err(Error::Validation(
                "grid must be at least 2 so a face box can majority-cover a cell".into(),
            ));
        }
        if self.token_len == 0 {
            return Err(Error::Validation("token_len must be positive".into()));
        }
        subspaces(self.feature_dim)?;
        for (what, p) in [
            ("genuine_fraction", self.genuine_fraction),
            ("dual_fraction", self.dual_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!("{what} must lie in [0,1], got {p}")));
            }
        }
        if self.type_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation("type_probs entries must lie in [0,1]".into()));
        }
        let makes_fakes = self.genuine_fraction < 1.0;
        let img_mass = self.type_probs[0] + self.type_probs[1];
        let txt_mass = self.type_probs[2] + self.type_probs[3];
        if makes_fakes && img_mass + txt_mass <= 0.0 {
            return Err(Error::Validation(
                "type_probs must carry positive mass when fakes are generated".into(),
            ));
        }
        if makes_fakes && self.dual_fraction > 0.0 && (img_mass <= 0.0 || txt_mass <= 0.0) {
            return Err(Error::Validation(
                "dual manipulations need positive mass on both an image and a text type".into(),
            ));
        }
        if self.source_shift < 0.0 || self.topic_mismatch < 0.0 {
            return Err(Error::Validation("shift magnitudes must be non-negative".into()));
        }
        Ok(())
    }
}

/// One image-text sample with complete ground truth.
///
/// `patch_features` holds g² rows (row-major over the grid) and
/// `token_features` holds `token_len` rows of which the first `valid_tokens`
/// are real; padding rows are exactly zero. Label vectors use 0/1 entries.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediaPair {
    pub id: u64,
    pub topic_id: u32,
    pub is_fake: bool,
    pub types: Vec<ManipType>,
    /// Normalized (cx, cy, w, h); present exactly for image manipulations.
    pub face_box: Option<[f64; 4]>,
    pub valid_tokens: usize,
    pub token_labels: Vec<u8>,
    pub patch_labels: Vec<u8>,
    pub token_features: Vec<Vec<f64>>,
    pub patch_features: Vec<Vec<f64>>,
}

/// Marks each grid cell whose area is at least half inside the box.
///
/// Cells are the g² equal rectangles of the unit square, indexed row-major.
/// No box means no marked cells.
pub fn derive_patch_labels(face_box: Option<[f64; 4]>, grid: usize) -> Vec<u8> {
    let mut out = vec![0u8; grid * grid];
    let Some([cx, cy, w, h]) = face_box else {
        return out;
    };
    let (x1, y1, x2, y2) = (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
    let cell = 1.0 / grid as f64;
    for r in 0..grid {
        for c in 0..grid {
            let gx = c as f64 * cell;
            let gy = r as f64 * cell;
            let ix = (x2.min(gx + cell) - x1.max(gx)).max(0.0);
            let iy = (y2.min(gy + cell) - y1.max(gy)).max(0.0);
            if ix * iy >= 0.5 * cell * cell {
                out[r * grid + c] = 1;
            }
        }
    }
    out
}

impl MediaPair {
    /// Grid side length implied by the patch count.
    pub fn grid(&self) -> usize {
        (self.patch_features.len() as f64).sqrt().round() as usize
    }

    /// Checks every structural invariant. Run on write and on read.
    pub fn validate(&self) -> Result<()> {
        let n = self.patch_features.len();
        let g = self.grid();
        if g < 1 || g * g != n {
            return Err(Error::Validation(format!(
                "patch count {n} is not a square grid"
            )));
        }
        let m = self.token_features.len();
        if m == 0 {
            return Err(Error::Validation("empty token sequence".into()));
        }
        if self.valid_tokens == 0 || self.valid_tokens > m {
            return Err(Error::Validation(format!(
                "valid_tokens {} outside 1..={m}",
                self.valid_tokens
            )));
        }
        let d = self.patch_features[0].len();
        if d == 0 {
            return Err(Error::Validation("zero-width features".into()));
        }
        for (what, rows) in [("patch", &self.patch_features), ("token", &self.token_features)] {
            for (i, row) in rows.iter().enumerate() {
                if row.len() != d {
                    return Err(Error::Validation(format!(
                        "{what} row {i} has width {}, expected {d}",
                        row.len()
                    )));
                }
                if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!(
                        "non-finite feature {v} in {what} row {i}"
                    )));
                }
            }
        }
        for (i, row) in self.token_features.iter().enumerate().skip(self.valid_tokens) {
            if row.iter().any(|&v| v != 0.0) {
                return Err(Error::Validation(format!("padding token {i} is not zero")));
            }
        }
        if self.token_labels.len() != m || self.patch_labels.len() != n {
            return Err(Error::Validation("label vector length mismatch".into()));
        }
        if self
            .token_labels
            .iter()
            .chain(self.patch_labels.iter())
            .any(|&l| l > 1)
        {
            return Err(Error::Validation("labels must be 0 or 1".into()));
        }
        // Type-set structure: at most one image and one text manipulation,
        // canonical order, no duplicates.
        let mut seen = [false; 4];
        for t in &self.types {
            if seen[t.index()] {
                return Err(Error::Validation(format!("duplicate type {}", t.name())));
            }
            seen[t.index()] = true;
        }
        let mut sorted = self.types.clone();
        sorted.sort_by_key(|t| t.index());
        if sorted != self.types {
            return Err(Error::Validation("types not in canonical order".into()));
        }
        let img_types = self.types.iter().filter(|t| t.is_image()).count();
        let txt_types = self.types.len() - img_types;
        if img_types > 1 || txt_types > 1 {
            return Err(Error::Validation(
                "at most one image and one text manipulation per pair".into(),
            ));
        }
        if self.is_fake != !self.types.is_empty() {
            return Err(Error::Validation(
                "is_fake must hold exactly when the type set is non-empty".into(),
            ));
        }
        match (&self.face_box, img_types > 0) {
            (Some(_), false) => {
                return Err(Error::Validation("face box without an image manipulation".into()))
            }
            (None, true) => {
                return Err(Error::Validation("image manipulation without a face box".into()))
            }
            _ => {}
        }
        if let Some([cx, cy, w, h]) = self.face_box {
            if w <= 0.0 || h <= 0.0 {
                return Err(Error::Validation(format!(
                    "degenerate face box ({cx}, {cy}, {w}, {h})"
                )));
            }
            let (x1, y1, x2, y2) = (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
            if x1 < -1e-12 || y1 < -1e-12 || x2 > 1.0 + 1e-12 || y2 > 1.0 + 1e-12 {
                return Err(Error::Validation("face box leaves the unit square".into()));
            }
        }
        if self.patch_labels != derive_patch_labels(self.face_box, g) {
            return Err(Error::Validation(
                "patch labels disagree with the face box".into(),
            ));
        }
        if self.face_box.is_some() && !self.patch_labels.contains(&1) {
            return Err(Error::Validation("face box covers no grid cell".into()));
        }
        let token_hits = self.token_labels.iter().filter(|&&l| l == 1).count();
        if token_hits > 0 && txt_types == 0 {
            return Err(Error::Validation("token labels without a text manipulation".into()));
        }
        if token_hits == 0 && txt_types > 0 {
            return Err(Error::Validation("text manipulation marked no tokens".into()));
        }
        if self.token_labels[self.valid_tokens..].iter().any(|&l| l != 0) {
            return Err(Error::Validation("token label on a padding position".into()));
        }
        Ok(())
    }

    pub fn patch_tensor<R: Real>(&self) -> Tensor<R> {
        let d = self.patch_features[0].len();
        let flat: Vec<f64> = self.patch_features.iter().flatten().copied().collect();
        Tensor::from_f64(self.patch_features.len(), d, &flat)
            .expect("validated features are finite")
    }

    pub fn token_tensor<R: Real>(&self) -> Tensor<R> {
        let d = self.token_features[0].len();
        let flat: Vec<f64> = self.token_features.iter().flatten().copied().collect();
        Tensor::from_f64(self.token_features.len(), d, &flat)
            .expect("validated features are finite")
    }

    /// True for real tokens, false for padding.
    pub fn token_mask(&self) -> Vec<bool> {
        (0..self.token_features.len()).map(|i| i < self.valid_tokens).collect()
    }

    /// Multi-label type targets in FS, FA, TS, TA order.
    pub fn type_targets(&self) -> [f64; 4] {
        let mut t = [0.0; 4];
        for ty in &self.types {
            t[ty.index()] = 1.0;
        }
        t
    }

    /// Serializes to one JSON line with floats at 17 significant digits, so
    /// values round-trip bit-exactly and files are reproducible byte for byte.
    pub fn to_jsonl_line(&self) -> String {
        let mut s = String::with_capacity(64 * self.patch_features.len() * 24);
        s.push_str("{\"id\":");
        let _ = write!(s, "{}", self.id);
        let _ = write!(s, ",\"topic_id\":{}", self.topic_id);
        let _ = write!(s, ",\"is_fake\":{}", self.is_fake);
        s.push_str(",\"types\":[");
        for (i, t) in self.types.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "\"{}\"", t.name());
        }
        s.push_str("],\"face_box\":");
        match &self.face_box {
            None => s.push_str("null"),
            Some(b) => push_floats(&mut s, b),
        }
        let _ = write!(s, ",\"valid_tokens\":{}", self.valid_tokens);
        s.push_str(",\"token_labels\":");
        push_labels(&mut s, &self.token_labels);
        s.push_str(",\"patch_labels\":");
        push_labels(&mut s, &self.patch_labels);
        s.push_str(",\"token_features\":");
        push_rows(&mut s, &self.token_features);
        s.push_str(",\"patch_features\":");
        push_rows(&mut s, &self.patch_features);
        s.push('}');
        s
    }
}

fn push_floats(s: &mut String, v: &[f64]) {
    s.push('[');
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{x:.16e}");
    }
    s.push(']');
}

fn push_labels(s: &mut String, v: &[u8]) {
    s.push('[');
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{x}");
    }
    s.push(']');
}

fn push_rows(s: &mut String, rows: &[Vec<f64>]) {
    s.push('[');
    for (i, row) in rows.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        push_floats(s, row);
    }
    s.push(']');
}

/// Companion metadata written next to each dataset file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub config: GenConfig,
    pub samples: usize,
    /// SHA-256 over the exact bytes of the JSONL file.
    pub sha256: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

/// Both splits of a generated corpus.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<MediaPair>,
    pub test: Vec<MediaPair>,
}

/// SplitMix64 finalizer; decorrelates structured counter inputs.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream seed for (corpus seed, stream tag, counter).
fn derive_seed(seed: u64, tag: u64, counter: u64) -> u64 {
    mix64(seed ^ mix64(tag.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ mix64(counter.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random direction on the unit sphere.
fn unit_gauss(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    for _ in 0..16 {
        let v: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
    unreachable!("sixteen consecutive near-zero gaussian vectors")
}

/// Corpus-level latent vectors, fixed by the seed: the topic pool and the
/// sentiment axis.
struct Corpus {
    sub: Subspaces,
    topics: Vec<Vec<f64>>,
    sent_dir: Vec<f64>,
}

fn build_corpus(cfg: &GenConfig) -> Result<Corpus> {
    let sub = subspaces(cfg.feature_dim)?;
    let topics = (0..TOPIC_POOL)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xC0, t as u64));
            unit_gauss(&mut rng, sub.topic.len())
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xC1, 0));
    let sent_dir = unit_gauss(&mut rng, sub.sentiment.len());
    Ok(Corpus { sub, topics, sent_dir })
}

fn weighted_pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        r -= w;
        if r < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn choose_types(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> (Option<ManipType>, Option<ManipType>) {
    let p = &cfg.type_probs;
    if rng.gen::<f64>() < cfg.dual_fraction {
        let img = ManipType::ALL[weighted_pick(rng, &p[..2])];
        let txt = ManipType::ALL[2 + weighted_pick(rng, &p[2..])];
        (Some(img), Some(txt))
    } else {
        let t = ManipType::ALL[weighted_pick(rng, p)];
        if t.is_image() {
            (Some(t), None)
        } else {
            (None, Some(t))
        }
    }
}

/// Re-sources a rectangular patch region and, for FS, replaces its topic.
fn plant_image_manipulation(
    cfg: &GenConfig,
    corpus: &Corpus,
    pair: &mut MediaPair,
    ty: ManipType,
    img_src: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    debug_assert!(ty.is_image());
    for _ in 0..128 {
        let w = rng.gen_range(0.2..0.5);
        let h = rng.gen_range(0.2..0.5);
        let cx = rng.gen_range(w / 2.0..1.0 - w / 2.0);
        let cy = rng.gen_range(h / 2.0..1.0 - h / 2.0);
        let labels = derive_patch_labels(Some([cx, cy, w, h]), cfg.grid);
        if labels.contains(&1) {
            pair.face_box = Some([cx, cy, w, h]);
            pair.patch_labels = labels;
            break;
        }
    }
    if pair.face_box.is_none() {
        return Err(Error::Validation(
            "no face box majority-covered a grid cell after 128 draws".into(),
        ));
    }
    let sub = &corpus.sub;
    let alt_src = unit_gauss(rng, sub.style.len());
    let alt_topic_id = (pair.topic_id as usize + rng.gen_range(1..TOPIC_POOL)) % TOPIC_POOL;
    let alt_topic = &corpus.topics[alt_topic_id];
    let base_topic = &corpus.topics[pair.topic_id as usize];
    for i in 0..pair.patch_labels.len() {
        if pair.patch_labels[i] != 1 {
            continue;
        }
        let row = &mut pair.patch_features[i];
        for (j, col) in sub.style.clone().enumerate() {
            row[col] =
                img_src[j] + cfg.source_shift * alt_src[j] + STYLE_JITTER * COV_SCALE * gauss(rng);
        }
        for (j, col) in sub.topic.clone().enumerate() {
            row[col] = match ty {
                ManipType::FS => cfg.topic_mismatch * alt_topic[j] + TOPIC_JITTER * gauss(rng),
                _ => base_topic[j] + TOPIC_JITTER * (1.0 + cfg.topic_mismatch * 0.2) * gauss(rng),
            };
        }
    }
    pair.types.push(ty);
    Ok(())
}

/// Replaces topic/source (TS) or flips sentiment (TA) on a token subset.
fn plant_text_manipulation(
    cfg: &GenConfig,
    corpus: &Corpus,
    pair: &mut MediaPair,
    ty: ManipType,
    txt_src: &[f64],
    polarity: f64,
    rng: &mut ChaCha8Rng,
) {
    debug_assert!(!ty.is_image());
    let valid = pair.valid_tokens;
    let frac = match ty {
        ManipType::TS => rng.gen_range(0.3..=0.6),
        _ => rng.gen_range(0.1..=0.3),
    };
    let count = ((frac * valid as f64).round() as usize).clamp(1, valid);
    let mut pos: Vec<usize> = (0..valid).collect();
    pos.shuffle(rng);
    pos.truncate(count);
    pos.sort_unstable();

    let sub = &corpus.sub;
    match ty {
        ManipType::TS => {
            let alt_topic_id = (pair.topic_id as usize + rng.gen_range(1..TOPIC_POOL)) % TOPIC_POOL;
            let alt_topic = &corpus.topics[alt_topic_id];
            let alt_src = unit_gauss(rng, sub.style.len());
            for &p in &pos {
                let row = &mut pair.token_features[p];
                for (j, col) in sub.style.clone().enumerate() {
                    row[col] = txt_src[j]
                        + cfg.source_shift * alt_src[j]
                        + STYLE_JITTER * COV_SCALE * gauss(rng);
                }
                for (j, col) in sub.topic.clone().enumerate() {
                    row[col] = cfg.topic_mismatch * alt_topic[j] + TOPIC_JITTER * gauss(rng);
                }
            }
        }
        _ => {
            for &p in &pos {
                let row = &mut pair.token_features[p];
                for (j, col) in sub.sentiment.clone().enumerate() {
                    row[col] =
                        -polarity * corpus.sent_dir[j] + SENT_JITTER * COV_SCALE * gauss(rng);
                }
            }
        }
    }
    for &p in &pos {
        pair.token_labels[p] = 1;
    }
    pair.types.push(ty);
}

fn build_pair(cfg: &GenConfig, corpus: &Corpus, split: Split, idx: usize) -> Result<MediaPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, split.tag(), idx as u64));
    let sub = &corpus.sub;
    let genuine = rng.gen::<f64>() < cfg.genuine_fraction;
    let topic_id = rng.gen_range(0..TOPIC_POOL as u32);
    let min_valid = (cfg.token_len / 2).max(4).min(cfg.token_len);
    let valid = rng.gen_range(min_valid..=cfg.token_len);
    let polarity = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let img_src = unit_gauss(&mut rng, sub.style.len());
    let txt_src = unit_gauss(&mut rng, sub.style.len());
    let topic_v = &corpus.topics[topic_id as usize];

    let d = cfg.feature_dim;
    let n = cfg.grid * cfg.grid;
    let mut patch_features = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = vec![0.0; d];
        for (j, col) in sub.style.clone().enumerate() {
            row[col] = img_src[j] + STYLE_JITTER * gauss(&mut rng);
        }
        for (j, col) in sub.topic.clone().enumerate() {
            row[col] = topic_v[j] + TOPIC_JITTER * gauss(&mut rng);
        }
        for col in sub.sentiment.clone() {
            row[col] = SENT_JITTER * gauss(&mut rng);
        }
        for col in sub.noise.clone() {
            row[col] = NOISE_SCALE * gauss(&mut rng);
        }
        patch_features.push(row);
    }
    let mut token_features = vec![vec![0.0; d]; cfg.token_len];
    for row in token_features.iter_mut().take(valid) {
        for (j, col) in sub.style.clone().enumerate() {
            row[col] = txt_src[j] + STYLE_JITTER * gauss(&mut rng);
        }
        for (j, col) in sub.topic.clone().enumerate() {
            row[col] = topic_v[j] + TOPIC_JITTER * gauss(&mut rng);
        }
        for (j, col) in sub.sentiment.clone().enumerate() {
            row[col] = polarity * corpus.sent_dir[j] + SENT_JITTER * gauss(&mut rng);
        }
        for col in sub.noise.clone() {
            row[col] = NOISE_SCALE * gauss(&mut rng);
        }
    }

    let mut pair = MediaPair {
        id: idx as u64,
        topic_id,
        is_fake: false,
        types: Vec::new(),
        face_box: None,
        valid_tokens: valid,
        token_labels: vec![0; cfg.token_len],
        patch_labels: vec![0; n],
        token_features,
        patch_features,
    };

    if !genuine {
        let (img_ty, txt_ty) = choose_types(cfg, &mut rng);
        if let Some(ty) = img_ty {
            plant_image_manipulation(cfg, corpus, &mut pair, ty, &img_src, &mut rng)?;
        }
        if let Some(ty) = txt_ty {
            plant_text_manipulation(cfg, corpus, &mut pair, ty, &txt_src, polarity, &mut rng);
        }
        pair.types.sort_by_key(|t| t.index());
        pair.is_fake = true;
    }
    pair.validate()?;
    Ok(pair)
}

/// Generates one split. Pure in (config, split): per-sample RNG streams make
/// the result independent of parallelism or sharding.
pub fn generate_split(cfg: &GenConfig, split: Split, count: usize) -> Result<Vec<MediaPair>> {
    cfg.validate()?;
    let corpus = build_corpus(cfg)?;
    par::map_indexed(count, |i| build_pair(cfg, &corpus, split, i))
        .into_iter()
        .collect()
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    Ok(Dataset {
        train: generate_split(cfg, Split::Train, cfg.train_count)?,
        test: generate_split(cfg, Split::Test, cfg.test_count)?,
    })
}

/// Metadata file path convention: `train.jsonl` → `train.meta.json`.
pub fn meta_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("meta.json")
}

/// Writes pairs as JSON lines plus a companion metadata file carrying the
/// generating config and a SHA-256 of the data bytes.
pub fn save_pairs(path: &Path, pairs: &[MediaPair], cfg: &GenConfig) -> Result<DatasetMeta> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut hasher = Sha256::new();
    for p in pairs {
        p.validate()?;
        let line = p.to_jsonl_line();
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let meta = DatasetMeta {
        config: cfg.clone(),
        samples: pairs.len(),
        sha256: format!("{:x}", hasher.finalize()),
    };
    let mut mf = BufWriter::new(File::create(meta_path(path))?);
    serde_json::to_writer_pretty(&mut mf, &meta)?;
    mf.write_all(b"\n")?;
    mf.flush()?;
    Ok(meta)
}

/// Reads and validates a JSONL dataset.
pub fn load_pairs(path: &Path) -> Result<Vec<MediaPair>> {
    let reader = BufReader::new(File::open(path)?);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let pair: MediaPair = serde_json::from_str(&line).map_err(|e| {
            Error::Validation(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        pair.validate()
            .map_err(|e| Error::Validation(format!("{} line {}: {e}", path.display(), i + 1)))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn load_meta(path: &Path) -> Result<DatasetMeta> {
    let f = File::open(meta_path(path))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

/// Recomputes the data file's hash and compares it with the metadata.
pub fn check_integrity(path: &Path) -> Result<DatasetMeta> {
    let meta = load_meta(path)?;
    let bytes = std::fs::read(path)?;
    let got = format!("{:x}", Sha256::digest(&bytes));
    if got != meta.sha256 {
        return Err(Error::Validation(format!(
            "{} content hash {got} does not match metadata {}",
            path.display(),
            meta.sha256
        )));
    }
    Ok(meta)
}
