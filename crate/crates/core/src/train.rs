//! Training loop, checkpoints, evaluation, ablation grid, and the token
//! threshold sweep — the operations behind every CLI subcommand.
//!
//! Determinism contract (64-bit mode): given (seed, config, dataset bytes),
//! every artifact this module produces is byte-identical across runs. The
//! pieces that make that hold:
//! * epoch shuffles come from a dedicated ChaCha8 stream derived from the
//!   run seed, independent of parameter initialization,
//! * per-sample gradients may be computed in parallel, but reduction is
//!   sequential over fixed-size chunks in sample-index order,
//! * optimizer moments accumulate in f64 regardless of model precision,
//! * checkpoints and reports serialize with exact float round-tripping.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::heads::LossBreakdown;
use crate::metrics::{self, EvalReport};
use crate::model::{ForwardTrace, Model};
use crate::optim::AdamW;
use crate::par;
use crate::real::Real;
use crate::synth::MediaPair;

/// Distinct ChaCha8 stream for batch shuffling so it can never collide with
/// the initialization stream that consumed the same seed.
const SHUFFLE_STREAM: u64 = 0x5b0f_f1e5;

/// Gradient reduction granularity: samples are mapped (possibly in parallel)
/// in chunks of this size and each chunk is folded into the accumulator in
/// index order, so the floating-point sum is identical no matter how many
/// threads ran the map.
const REDUCE_CHUNK: usize = 4;

/// Mean loss components over one epoch's training samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean: LossBreakdown,
}

/// Saved training artifact: enough to rebuild the exact model (config echo,
/// flat parameters in f64) plus provenance (epoch count, shuffle-RNG state,
/// content hash over everything else).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub raw_dim_image: usize,
    pub raw_dim_text: usize,
    pub epoch: usize,
    pub rng_state: String,
    pub params: Vec<f64>,
    pub sha256: String,
}

impl Checkpoint {
    /// SHA-256 over the canonical JSON of every field except the hash itself.
    pub fn content_hash(&self) -> String {
        let mut shadow = self.clone();
        shadow.sha256 = String::new();
        let bytes = serde_json::to_vec(&shadow).expect("checkpoint serialization cannot fail");
        format!("{:x}", Sha256::digest(&bytes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let expect = ckpt.content_hash();
        if expect != ckpt.sha256 {
            return Err(Error::Validation(format!(
                "{}: content hash mismatch (stored {}, computed {expect})",
                path.display(),
                ckpt.sha256
            )));
        }
        Ok(ckpt)
    }
}

/// Checkpoint plus the per-epoch loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn raw_dims(pairs: &[MediaPair]) -> Result<(usize, usize)> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Validation("dataset is empty".into()))?;
    let img = first
        .patch_features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Validation("sample has no patches".into()))?;
    let txt = first
        .token_features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Validation("sample has no tokens".into()))?;
    Ok((img, txt))
}

/// Per-sample gradients for one batch, reduced to the batch mean in f64.
/// Returns the individual loss breakdowns alongside so the caller can log
/// and diagnose. The reduction order is fixed by REDUCE_CHUNK, not by the
/// thread schedule.
fn batch_gradient<R: Real>(
    model: &Model<R>,
    pairs: &[MediaPair],
    batch: &[usize],
    weights: [f64; 5],
) -> Result<(Vec<LossBreakdown>, Vec<f64>)> {
    let n = model.store.flat_len();
    let mut acc = vec![0.0f64; n];
    let mut breakdowns = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(REDUCE_CHUNK) {
        let results: Vec<Result<(LossBreakdown, Vec<R>)>> = par::map_slice(chunk, |&i| {
            model.sample_gradient(&pairs[i], weights).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("sample id {}: {m}", pairs[i].id)),
                other => other,
            })
        });
        for r in results {
            let (b, g) = r?;
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a += gi.cast_f64();
            }
            breakdowns.push(b);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok((breakdowns, acc))
}

/// Trains a fresh model under `cfg` on `pairs`. Deterministic given the seed:
/// fixed shuffle stream, fixed batch boundaries, fixed reduction order.
/// A non-finite loss anywhere aborts with the offending batch's sample ids
/// and complete loss components.
pub fn train<R: Real>(cfg: &RunConfig, pairs: &[MediaPair]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (raw_img, raw_txt) = raw_dims(pairs)?;
    let spec = cfg.model_spec(raw_img, raw_txt);
    let mut model: Model<R> = Model::new(spec, cfg.seed)?;
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 6];
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            // Two layers of non-finite defense. The tape refuses to produce a
            // non-finite activation, so an overflow inside any forward pass
            // arrives here as a Numeric error naming the op and sample; wrap
            // it with the batch context. The breakdown scan below covers the
            // residual case of a loss that went bad without tripping a guard.
            let batch_ids: Vec<u64> = batch.iter().map(|&i| pairs[i].id).collect();
            let (breakdowns, grad) = batch_gradient(&model, pairs, batch, cfg.loss_weights)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!(
                        "epoch {epoch}, batch {batch_no} (sample ids {batch_ids:?}): {m}"
                    )),
                    other => other,
                })?;
            let bad: Vec<usize> = (0..batch.len())
                .filter(|&j| !breakdowns[j].total.is_finite())
                .collect();
            if !bad.is_empty() {
                let ids: Vec<u64> = bad.iter().map(|&j| pairs[batch[j]].id).collect();
                let dump = serde_json::to_string_pretty(
                    &bad.iter().map(|&j| &breakdowns[j]).collect::<Vec<_>>(),
                )?;
                return Err(Error::Numeric(format!(
                    "non-finite loss in epoch {epoch}, batch {batch_no}: sample ids {ids:?}, components {dump}"
                )));
            }
            let grad_r: Vec<R> = grad.iter().map(|&x| R::cast_from(x)).collect();
            opt.step(&mut model.store, &grad_r)?;
            for b in &breakdowns {
                sums[0] += b.l_binary;
                sums[1] += b.l_type;
                sums[2] += b.l_bbox;
                sums[3] += b.l_c;
                sums[4] += b.l_s;
                sums[5] += b.total;
            }
        }
        let inv = 1.0 / pairs.len() as f64;
        log.push(EpochLog {
            epoch,
            mean: LossBreakdown {
                l_binary: sums[0] * inv,
                l_type: sums[1] * inv,
                l_bbox: sums[2] * inv,
                l_c: sums[3] * inv,
                l_s: sums[4] * inv,
                total: sums[5] * inv,
                weights: cfg.loss_weights,
            },
        });
    }

    let rng_state = format!(
        "chacha8 seed={} stream={:#x} word_pos={}",
        cfg.seed,
        SHUFFLE_STREAM,
        shuffle_rng.get_word_pos()
    );
    let mut ckpt = Checkpoint {
        config: cfg.clone(),
        raw_dim_image: raw_img,
        raw_dim_text: raw_txt,
        epoch: cfg.epochs,
        rng_state,
        params: model.store.read_flat().iter().map(|x| x.cast_f64()).collect(),
        sha256: String::new(),
    };
    ckpt.sha256 = ckpt.content_hash();
    Ok(TrainOutcome { checkpoint: ckpt, log })
}

/// Rebuilds the model a checkpoint describes: same spec, same init seed,
/// parameters overwritten with the stored vector.
pub fn model_from_checkpoint<R: Real>(ckpt: &Checkpoint) -> Result<Model<R>> {
    ckpt.config.validate()?;
    let spec = ckpt.config.model_spec(ckpt.raw_dim_image, ckpt.raw_dim_text);
    let mut model: Model<R> = Model::new(spec, ckpt.config.seed)?;
    if ckpt.params.len() != model.store.flat_len() {
        return Err(Error::Validation(format!(
            "checkpoint has {} parameters, architecture wants {}",
            ckpt.params.len(),
            model.store.flat_len()
        )));
    }
    let flat: Vec<R> = ckpt.params.iter().map(|&x| R::cast_from(x)).collect();
    model.store.write_flat(&flat)?;
    Ok(model)
}

fn traces<R: Real>(model: &Model<R>, pairs: &[MediaPair]) -> Result<Vec<ForwardTrace>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(REDUCE_CHUNK) {
        let results: Vec<Result<ForwardTrace>> = par::map_slice(chunk, |p| model.trace(p));
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Full evaluation: one forward pass per sample, then every metric family.
/// Box metrics run over the face-manipulated subset only; token metrics use
/// the model's own threshold decisions over valid positions.
pub fn evaluate<R: Real>(model: &Model<R>, pairs: &[MediaPair]) -> Result<EvalReport> {
    let traces = traces(model, pairs)?;

    let scores: Vec<f64> = traces.iter().map(|t| t.binary_prob).collect();
    let labels: Vec<u8> = pairs.iter().map(|p| p.is_fake as u8).collect();

    let type_scores: Vec<[f64; 4]> = traces.iter().map(|t| t.type_probs).collect();
    let type_gt: Vec<[f64; 4]> = pairs.iter().map(MediaPair::type_targets).collect();

    let mut boxes_pred = Vec::new();
    let mut boxes_gt = Vec::new();
    for (t, p) in traces.iter().zip(pairs) {
        if let Some(gt) = p.face_box {
            boxes_pred.push(t.bbox);
            boxes_gt.push(gt);
        }
    }

    let flags: Vec<Vec<bool>> = traces.iter().map(|t| t.token_flags.clone()).collect();
    let token_gt: Vec<Vec<u8>> = pairs.iter().map(|p| p.token_labels.clone()).collect();
    let valid: Vec<usize> = pairs.iter().map(|p| p.valid_tokens).collect();

    let (auc, eer, acc) = (
        metrics::auc(&scores, &labels)?,
        metrics::eer(&scores, &labels)?,
        metrics::acc(&scores, &labels, 0.5)?,
    );
    let (map, cf1, of1) = metrics::multilabel_suite(&type_scores, &type_gt)?;
    let (iou_m, iou50, iou75) = metrics::iou_suite(&boxes_pred, &boxes_gt)?;
    let (precision, recall, f1) = metrics::token_prf1(&flags, &token_gt, &valid)?;

    let report = EvalReport {
        auc,
        eer,
        acc,
        map,
        cf1,
        of1,
        iou_m,
        iou50,
        iou75,
        precision,
        recall,
        f1,
        samples: pairs.len(),
        genuine_samples: pairs.iter().filter(|p| !p.is_fake).count(),
        face_manipulated_samples: boxes_gt.len(),
        text_manipulated_samples: pairs
            .iter()
            .filter(|p| p.types.iter().any(|t| !t.is_image()))
            .count(),
        valid_tokens: valid.iter().sum(),
    };
    report.validate()?;
    Ok(report)
}

/// One row of the token-threshold sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRow {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub flagged: usize,
}

/// Re-applies the token threshold at each tau over fixed consistency scores.
/// Scores are computed once; only the cut varies. Taus may include the
/// endpoints 0 and 1 (pure analysis — the model's own decisions always use
/// the configured tau in (0,1)).
pub fn sweep_threshold<R: Real>(
    model: &Model<R>,
    pairs: &[MediaPair],
    taus: &[f64],
) -> Result<Vec<SweepRow>> {
    if taus.is_empty() {
        return Err(Error::Validation("no thresholds to sweep".into()));
    }
    for t in taus {
        if !(0.0..=1.0).contains(t) {
            return Err(Error::Validation(format!("sweep tau {t} outside [0,1]")));
        }
    }
    let traces = traces(model, pairs)?;
    let token_gt: Vec<Vec<u8>> = pairs.iter().map(|p| p.token_labels.clone()).collect();
    let valid: Vec<usize> = pairs.iter().map(|p| p.valid_tokens).collect();

    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let flags: Vec<Vec<bool>> = traces
            .iter()
            .map(|t| t.token_scores.iter().map(|&s| s < tau).collect())
            .collect();
        let flagged = flags
            .iter()
            .zip(&valid)
            .map(|(f, &v)| f[..v].iter().filter(|&&x| x).count())
            .sum();
        let (precision, recall, f1) = metrics::token_prf1(&flags, &token_gt, &valid)?;
        rows.push(SweepRow { tau, precision, recall, f1, flagged });
    }
    Ok(rows)
}

/// One row of the ablation grid: which branches ran, how the variant scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub label: String,
    pub contextual_image: bool,
    pub contextual_text: bool,
    pub semantic_image: bool,
    pub semantic_text: bool,
    pub checkpoint_sha256: String,
    pub report: EvalReport,
}

/// The six studied variants: no branches (baseline), contextual pair only,
/// semantic pair only, image side only, text side only, everything.
/// Each entry is (label, baseline, [disable CI, CT, SI, ST]).
const ABLATION_GRID: [(&str, bool, [bool; 4]); 6] = [
    ("none", true, [true, true, true, true]),
    ("contextual-only", false, [false, false, true, true]),
    ("semantic-only", false, [true, true, false, false]),
    ("image-only", false, [false, true, false, true]),
    ("text-only", false, [true, false, true, false]),
    ("full", false, [false, false, false, false]),
];

/// Trains and evaluates every grid variant under the same seed and data.
pub fn ablate(
    cfg: &RunConfig,
    train_pairs: &[MediaPair],
    test_pairs: &[MediaPair],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(ABLATION_GRID.len());
    for (label, baseline, dis) in ABLATION_GRID {
        let mut variant = cfg.clone();
        variant.baseline = baseline;
        variant.disable_contextual_image = dis[0];
        variant.disable_contextual_text = dis[1];
        variant.disable_semantic_image = dis[2];
        variant.disable_semantic_text = dis[3];
        let outcome = run_train(&variant, train_pairs)?;
        let report = run_evaluate(&outcome.checkpoint, test_pairs)?;
        let t = variant.toggles();
        rows.push(AblationRow {
            label: label.to_string(),
            contextual_image: t.contextual_image,
            contextual_text: t.contextual_text,
            semantic_image: t.semantic_image,
            semantic_text: t.semantic_text,
            checkpoint_sha256: outcome.checkpoint.sha256.clone(),
            report,
        });
    }
    Ok(rows)
}

/// Precision-dispatching entry points, so callers hold no type parameter.
pub fn run_train(cfg: &RunConfig, pairs: &[MediaPair]) -> Result<TrainOutcome> {
    match cfg.precision {
        Precision::F64 => train::<f64>(cfg, pairs),
        Precision::F32 => train::<f32>(cfg, pairs),
    }
}

pub fn run_evaluate(ckpt: &Checkpoint, pairs: &[MediaPair]) -> Result<EvalReport> {
    match ckpt.config.precision {
        Precision::F64 => evaluate(&model_from_checkpoint::<f64>(ckpt)?, pairs),
        Precision::F32 => evaluate(&model_from_checkpoint::<f32>(ckpt)?, pairs),
    }
}

pub fn run_sweep(ckpt: &Checkpoint, pairs: &[MediaPair], taus: &[f64]) -> Result<Vec<SweepRow>> {
    match ckpt.config.precision {
        Precision::F64 => sweep_threshold(&model_from_checkpoint::<f64>(ckpt)?, pairs, taus),
        Precision::F32 => sweep_threshold(&model_from_checkpoint::<f32>(ckpt)?, pairs, taus),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, GenConfig};

    /// Small corpus + config that exercise everything in well under a second
    /// per epoch.
    fn tiny_setup(n_train: usize, n_test: usize) -> (Vec<MediaPair>, Vec<MediaPair>, RunConfig) {
        let gen = GenConfig {
            train_count: n_train,
            test_count: n_test,
            grid: 3,
            token_len: 6,
            feature_dim: 8,
            seed: 11,
            ..GenConfig::default()
        };
        let data = generate_dataset(&gen).unwrap();
        let cfg = RunConfig {
            dim: 8,
            encoder_depth: 1,
            co_layers: 1,
            processor_depth: 1,
            k_image: 2,
            k_text: 2,
            epochs: 2,
            batch_size: 4,
            seed: 3,
            ..RunConfig::default()
        };
        (data.train, data.test, cfg)
    }

    #[test]
    fn zero_learning_rate_keeps_initial_parameters() {
        let (train_pairs, _, mut cfg) = tiny_setup(8, 4);
        cfg.learning_rate = 0.0;
        cfg.epochs = 3;
        let outcome = train::<f64>(&cfg, &train_pairs).unwrap();

        let (ri, rt) = raw_dims(&train_pairs).unwrap();
        let fresh: Model<f64> = Model::new(cfg.model_spec(ri, rt), cfg.seed).unwrap();
        assert_eq!(outcome.checkpoint.params, fresh.store.read_flat());
        assert_eq!(outcome.log.len(), 3);
    }

    #[test]
    fn same_seed_and_config_reproduce_the_checkpoint_hash() {
        let (train_pairs, _, cfg) = tiny_setup(8, 4);
        let a = train::<f64>(&cfg, &train_pairs).unwrap();
        let b = train::<f64>(&cfg, &train_pairs).unwrap();
        assert_eq!(a.checkpoint.sha256, b.checkpoint.sha256);
        assert_eq!(a.log, b.log);
        assert!(a
            .checkpoint
            .params
            .iter()
            .zip(&b.checkpoint.params)
            .all(|(x, y)| x.to_bits() == y.to_bits()));

        let mut other = cfg.clone();
        other.seed = cfg.seed + 1;
        let c = train::<f64>(&other, &train_pairs).unwrap();
        assert_ne!(a.checkpoint.sha256, c.checkpoint.sha256);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical_and_tamper_evident() {
        let (train_pairs, test_pairs, cfg) = tiny_setup(8, 4);
        let outcome = train::<f64>(&cfg, &train_pairs).unwrap();
        let dir = std::env::temp_dir().join("crosscheck-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt.json");
        outcome.checkpoint.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, outcome.checkpoint);
        let before = run_evaluate(&outcome.checkpoint, &test_pairs).unwrap();
        let after = run_evaluate(&loaded, &test_pairs).unwrap();
        assert_eq!(before, after);

        // Saving the loaded checkpoint again produces the same bytes.
        let path2 = dir.join("model2.ckpt.json");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        // Flipping one parameter must be caught by the hash check.
        let mut tampered = loaded.clone();
        tampered.params[0] += 1e-9;
        tampered.save(&path2).unwrap();
        assert!(Checkpoint::load(&path2).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn loss_log_is_complete_and_loss_moves() {
        let (train_pairs, _, mut cfg) = tiny_setup(16, 4);
        cfg.epochs = 4;
        let outcome = train::<f64>(&cfg, &train_pairs).unwrap();
        assert_eq!(outcome.log.len(), 4);
        for (i, e) in outcome.log.iter().enumerate() {
            assert_eq!(e.epoch, i);
            e.mean.validate().unwrap();
        }
        let first = outcome.log.first().unwrap().mean.total;
        let last = outcome.log.last().unwrap().mean.total;
        assert!(
            last < first,
            "training should reduce mean loss: first {first}, last {last}"
        );
    }

    #[test]
    fn numeric_overflow_aborts_with_batch_diagnostics() {
        let (mut train_pairs, _, cfg) = tiny_setup(8, 4);
        // A feature large enough that its square overflows poisons every
        // forward pass that touches the sample; the abort must say which
        // epoch, which batch, and which sample id.
        let victim = 5;
        let victim_id = train_pairs[victim].id;
        train_pairs[victim].patch_features[0][0] = 1e300;

        let err = train::<f64>(&cfg, &train_pairs).unwrap_err();
        assert_eq!(err.exit_code(), 3, "overflow must be a numeric failure");
        let msg = err.to_string();
        assert!(msg.contains("epoch 0"), "missing epoch context: {msg}");
        assert!(msg.contains("batch"), "missing batch context: {msg}");
        assert!(
            msg.contains(&format!("sample id {victim_id}")),
            "missing offending sample id: {msg}"
        );

        // The same poison hits batch_gradient directly with the sample id.
        let (ri, rt) = raw_dims(&train_pairs).unwrap();
        let model: Model<f64> = Model::new(cfg.model_spec(ri, rt), cfg.seed).unwrap();
        let batch: Vec<usize> = (0..8).collect();
        let err = batch_gradient(&model, &train_pairs, &batch, cfg.loss_weights).unwrap_err();
        assert!(err.to_string().contains(&format!("sample id {victim_id}")));
    }

    #[test]
    fn evaluation_counts_and_report_are_consistent() {
        let (train_pairs, test_pairs, cfg) = tiny_setup(8, 6);
        let (ri, rt) = raw_dims(&train_pairs).unwrap();
        let model: Model<f64> = Model::new(cfg.model_spec(ri, rt), cfg.seed).unwrap();
        let report = evaluate(&model, &test_pairs).unwrap();
        assert_eq!(report.samples, test_pairs.len());
        assert_eq!(
            report.genuine_samples,
            test_pairs.iter().filter(|p| !p.is_fake).count()
        );
        assert_eq!(
            report.face_manipulated_samples,
            test_pairs.iter().filter(|p| p.face_box.is_some()).count()
        );
        assert_eq!(
            report.valid_tokens,
            test_pairs.iter().map(|p| p.valid_tokens).sum::<usize>()
        );
        // Evaluating twice gives the identical report.
        let again = evaluate(&model, &test_pairs).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn sweep_endpoints_and_monotone_recall() {
        let (train_pairs, test_pairs, cfg) = tiny_setup(8, 6);
        let (ri, rt) = raw_dims(&train_pairs).unwrap();
        let model: Model<f64> = Model::new(cfg.model_spec(ri, rt), cfg.seed).unwrap();
        let taus: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let rows = sweep_threshold(&model, &test_pairs, &taus).unwrap();
        assert_eq!(rows.len(), taus.len());

        // tau = 0 flags nothing (strict inequality); zero-division convention
        // makes precision and recall 0.
        assert_eq!(rows[0].flagged, 0);
        assert_eq!((rows[0].precision, rows[0].recall, rows[0].f1), (0.0, 0.0, 0.0));

        // Scores live strictly below 1 here, so tau = 1 flags every valid
        // token and recall hits 1.
        let traces = traces(&model, &test_pairs).unwrap();
        assert!(traces
            .iter()
            .all(|t| t.token_scores.iter().all(|&s| s < 1.0)));
        let total_valid: usize = test_pairs.iter().map(|p| p.valid_tokens).sum();
        assert_eq!(rows.last().unwrap().flagged, total_valid);
        assert_eq!(rows.last().unwrap().recall, 1.0);

        // Raising tau never unflags: flag counts and recall are monotone.
        for w in rows.windows(2) {
            assert!(w[1].flagged >= w[0].flagged);
            assert!(w[1].recall >= w[0].recall);
        }

        assert!(sweep_threshold(&model, &test_pairs, &[1.5]).is_err());
        assert!(sweep_threshold(&model, &test_pairs, &[]).is_err());
    }

    #[test]
    fn ablation_grid_shape_and_baseline_equivalence() {
        let (train_pairs, test_pairs, mut cfg) = tiny_setup(8, 6);
        cfg.epochs = 1;
        let rows = ablate(&cfg, &train_pairs, &test_pairs).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].label, "none");
        assert_eq!(rows[5].label, "full");
        assert!(!rows[0].contextual_image && !rows[0].semantic_text);
        assert!(rows[5].contextual_image && rows[5].semantic_text);
        // Row labels are unique and every variant produced a valid report.
        let mut labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        labels.dedup();
        assert_eq!(labels.len(), 6);

        // All-off via individual switches is exactly baseline mode.
        let mut all_off = cfg.clone();
        all_off.disable_contextual_image = true;
        all_off.disable_contextual_text = true;
        all_off.disable_semantic_image = true;
        all_off.disable_semantic_text = true;
        let a = run_train(&all_off, &train_pairs).unwrap();
        let mut base = cfg.clone();
        base.baseline = true;
        let b = run_train(&base, &train_pairs).unwrap();
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
    }

    #[test]
    fn f32_mode_trains_and_evaluates() {
        let (train_pairs, test_pairs, mut cfg) = tiny_setup(8, 6);
        cfg.precision = Precision::F32;
        cfg.epochs = 1;
        let outcome = run_train(&cfg, &train_pairs).unwrap();
        let report = run_evaluate(&outcome.checkpoint, &test_pairs).unwrap();
        report.validate().unwrap();
    }
}
