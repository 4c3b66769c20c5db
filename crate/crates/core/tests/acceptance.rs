//! Release gate: one test per release-blocking criterion. Every body ends in
//! a `PASS <criterion>: ...` line carrying the measured numbers (visible with
//! `--nocapture`); cargo's per-test ok/FAILED listing is the authoritative
//! pass/fail record, one line per criterion.
//!
//! The learned-behavior criteria (learnability, directional comparison,
//! threshold stability) share one set of trained runs through a lazy fixture,
//! so the training bill is paid once. Everything that trains or times takes a
//! common lock first: wall-clock claims are only meaningful when the body has
//! the machine to itself.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crosscheck_core::config::RunConfig;
use crosscheck_core::contextual::{contextual_gt, select_reliable_suspicious};
use crosscheck_core::gradcheck;
use crosscheck_core::heads::{consistency_loss, subtask_losses, SampleTargets};
use crosscheck_core::metrics::{self, EvalReport};
use crosscheck_core::model::{wire_forward, BranchToggles, Model, ModelSpec};
use crosscheck_core::params::ParamStore;
use crosscheck_core::semantic::semantic_gt;
use crosscheck_core::synth::{generate_dataset, Dataset, GenConfig};
use crosscheck_core::tape::Graph;
use crosscheck_core::train::{self, Checkpoint};

const SEEDS: [u64; 3] = [7, 8, 9];

/// Training recipe used for the learned-behavior criteria: the default desk
/// model shrunk to one co-attention layer and one processor block, smaller
/// batches, and two dozen epochs — tuned so a run finishes in a fraction of
/// the time budget while clearing the metric bars with margin.
fn learn_config(seed: u64, baseline: bool) -> RunConfig {
    RunConfig {
        co_layers: 1,
        processor_depth: 1,
        epochs: 24,
        batch_size: 16,
        seed,
        baseline,
        ..RunConfig::default()
    }
}

struct SeedRun {
    seed: u64,
    full_ckpt: Checkpoint,
    full: EvalReport,
    base: EvalReport,
    /// One full-model training plus its evaluation, with the machine to itself.
    full_secs: f64,
}

struct Trained {
    data: Dataset,
    runs: Vec<SeedRun>,
}

static HEAVY: Mutex<()> = Mutex::new(());
static DATA: OnceLock<Dataset> = OnceLock::new();
static TRAINED: OnceLock<Trained> = OnceLock::new();

/// Serialize the expensive bodies; a panic in one must not wedge the rest.
fn heavy_lock() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn dataset() -> &'static Dataset {
    DATA.get_or_init(|| generate_dataset(&GenConfig::default()).expect("default corpus"))
}

fn trained() -> &'static Trained {
    TRAINED.get_or_init(|| {
        let data = generate_dataset(&GenConfig::default()).expect("default corpus");
        let mut runs = Vec::new();
        for seed in SEEDS {
            let t0 = Instant::now();
            let cfg = learn_config(seed, false);
            let outcome = train::run_train(&cfg, &data.train).expect("full training");
            let full = train::run_evaluate(&outcome.checkpoint, &data.test).expect("full eval");
            let full_secs = t0.elapsed().as_secs_f64();

            let base_cfg = learn_config(seed, true);
            let base_out = train::run_train(&base_cfg, &data.train).expect("baseline training");
            let base = train::run_evaluate(&base_out.checkpoint, &data.test).expect("baseline eval");
            runs.push(SeedRun { seed, full_ckpt: outcome.checkpoint, full, base, full_secs });
        }
        Trained { data, runs }
    })
}

#[test]
fn gradient_fidelity() {
    let _g = heavy_lock();
    let started = Instant::now();

    // One guaranteed dual-manipulated pair so every loss term is live.
    let gen = GenConfig {
        train_count: 1,
        test_count: 1,
        grid: 3,
        token_len: 6,
        feature_dim: 8,
        genuine_fraction: 0.0,
        dual_fraction: 1.0,
        seed: 40,
        ..GenConfig::default()
    };
    let pair = generate_dataset(&gen).unwrap().train.remove(0);
    assert!(pair.face_box.is_some(), "grad-check pair must exercise the box loss");
    assert!(pair.token_labels.iter().any(|&l| l == 1), "and the token losses");

    let spec = ModelSpec {
        raw_dim_image: 8,
        raw_dim_text: 8,
        dim: 16,
        encoder_depth: 1,
        co_layers: 1,
        processor_depth: 1,
        k_image: 2,
        k_text: 2,
        tau: 0.5,
        suspicious_first: false,
        toggles: BranchToggles::all_on(),
    };
    let weights = [1.0; 5];
    let model: Model<f64> = Model::new(spec, 40).unwrap();
    let (_, analytic) = model.sample_gradient(&pair, weights).unwrap();
    let coords = gradcheck::sample_coords(model.store.flat_len(), 200, 40);
    assert!(coords.len() >= 200);

    let Model { mut store, arch, spec } = model;
    let targets = SampleTargets::from_pair(&pair);
    let outcome = gradcheck::grad_check(&mut store, &analytic, &coords, 1e-5, |st| {
        let mut g = Graph::new(st);
        let (preds, _) = wire_forward(&arch, spec.tau, &mut g, &pair)?;
        let (total, _) = subtask_losses(&mut g, &preds, &targets, weights)?;
        Ok(g.value_f64(total)[0])
    })
    .unwrap();

    let secs = started.elapsed().as_secs_f64();
    assert!(
        outcome.max_rel_err < 1e-4,
        "worst relative error {:.3e} at {} (coordinate {})",
        outcome.max_rel_err,
        outcome.worst_param,
        outcome.worst_coord
    );
    assert!(secs < 60.0, "finite-difference sweep took {secs:.1}s");
    println!(
        "PASS gradient_fidelity: {} coordinates, max relative error {:.3e} (< 1e-4), {:.1}s",
        outcome.checked, outcome.max_rel_err, secs
    );
}

#[test]
fn consistency_matrix_properties() {
    let store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst_asym = 0.0f64;
    let mut worst_diag = 0.0f64;
    let mut worst_scale_drift = 0.0f64;

    for case in 0..1000 {
        let n = rng.gen_range(2..=12usize);
        let d = rng.gen_range(3..=24usize);
        let spread = 10f64.powf(rng.gen_range(-1.0..1.0));
        let rows: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-spread..spread)).collect();

        let mut g = Graph::new(&store);
        let a = g.constant_f64(n, d, &rows).unwrap();
        let gram = g.cosine_gram(a).unwrap();
        let m = g.value_f64(gram);

        for i in 0..n {
            for j in 0..n {
                let v = m[i * n + j];
                assert!((0.0..=1.0).contains(&v), "case {case}: entry {v} outside [0,1]");
                worst_asym = worst_asym.max((v - m[j * n + i]).abs());
            }
            worst_diag = worst_diag.max((m[i * n + i] - 1.0).abs());
        }

        // A single positive rescaling of the mapped rows must change nothing:
        // not the matrix, not which partners get picked.
        let c = 10f64.powf(rng.gen_range(-1.0..1.0));
        let scaled: Vec<f64> = rows.iter().map(|v| v * c).collect();
        let mut g2 = Graph::new(&store);
        let a2 = g2.constant_f64(n, d, &scaled).unwrap();
        let gram2 = g2.cosine_gram(a2).unwrap();
        let m2 = g2.value_f64(gram2);
        for (x, y) in m.iter().zip(&m2) {
            worst_scale_drift = worst_scale_drift.max((x - y).abs());
        }
        let k = rng.gen_range(1..n);
        for anchor in 0..n {
            let row = &m[anchor * n..(anchor + 1) * n];
            let row2 = &m2[anchor * n..(anchor + 1) * n];
            let before = select_reliable_suspicious(row, anchor, k, None).unwrap();
            let after = select_reliable_suspicious(row2, anchor, k, None).unwrap();
            assert_eq!(before.reliable, after.reliable, "case {case}: reliable set moved");
            assert_eq!(before.suspicious, after.suspicious, "case {case}: suspicious set moved");
        }

        // Per-row scores against a reference embedding live in [0,1] too.
        let reference: Vec<f64> = (0..d).map(|_| rng.gen_range(-spread..spread)).collect();
        let mut g3 = Graph::new(&store);
        let rows_node = g3.constant_f64(n, d, &rows).unwrap();
        let ref_node = g3.constant_f64(1, d, &reference).unwrap();
        let against = g3.cosine_against(rows_node, ref_node).unwrap();
        let s = g3.value_f64(against);
        for v in &s {
            assert!((0.0..=1.0).contains(v), "case {case}: semantic score {v} outside [0,1]");
        }
    }

    assert!(worst_asym < 1e-12, "max asymmetry {worst_asym:.3e}");
    assert!(worst_diag < 1e-12, "diagonal off unit by {worst_diag:.3e}");
    assert!(worst_scale_drift < 1e-12, "scaling moved entries by {worst_scale_drift:.3e}");
    println!(
        "PASS consistency_matrix_properties: 1000 inputs, asymmetry {worst_asym:.1e}, \
         diagonal {worst_diag:.1e}, scale drift {worst_scale_drift:.1e}, selections stable"
    );
}

#[test]
fn oracle_equivalence() {
    // Ground-truth builders, exhaustively for every 0/1 labeling up to n=8.
    let mut gt_cases = 0usize;
    for n in 1..=8usize {
        for bits in 0..(1u32 << n) {
            let labels: Vec<u8> = (0..n).map(|i| ((bits >> i) & 1) as u8).collect();
            let pair_m = contextual_gt(&labels);
            let per_row = semantic_gt(&labels);
            for i in 0..n {
                assert_eq!(per_row[i], if labels[i] == 0 { 1.0 } else { 0.0 });
                for j in 0..n {
                    let want = if labels[i] == labels[j] { 1.0 } else { 0.0 };
                    assert_eq!(pair_m[i * n + j], want, "labels {labels:?} at ({i},{j})");
                }
            }
            gt_cases += 1;
        }
    }

    // Top/bottom-k selection against repeated max/min extraction.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..1000 {
        let n = rng.gen_range(2..=20usize);
        let mut row: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        if case % 3 == 0 {
            for v in row.iter_mut() {
                *v = (*v * 2.0).round() / 2.0; // force ties
            }
        }
        let anchor = rng.gen_range(0..n);
        let k = rng.gen_range(1..=n);
        let valid: Option<Vec<bool>> = if case % 2 == 0 {
            None
        } else {
            let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
            // Keep at least one candidate besides the anchor.
            let fallback = if anchor == 0 { n - 1 } else { 0 };
            mask[fallback] = true;
            Some(mask)
        };
        let got = select_reliable_suspicious(&row, anchor, k, valid.as_deref()).unwrap();

        // Oracle by repeated extraction: pull the single best (or worst)
        // remaining candidate k times, breaking ties toward the lower index.
        let pool: Vec<usize> = (0..n)
            .filter(|&j| j != anchor && valid.as_ref().map_or(true, |m| m[j]))
            .collect();
        let take = k.min(pool.len());
        let extract = |higher_wins: bool| -> Vec<usize> {
            let mut remaining = pool.clone();
            let mut picked = Vec::new();
            for _ in 0..take {
                let mut choice = remaining[0];
                for &j in &remaining[1..] {
                    let better = if higher_wins { row[j] > row[choice] } else { row[j] < row[choice] };
                    if better || (row[j] == row[choice] && j < choice) {
                        choice = j;
                    }
                }
                remaining.retain(|&x| x != choice);
                picked.push(choice);
            }
            picked
        };
        assert_eq!(got.reliable, extract(true), "case {case} reliable");
        assert_eq!(got.suspicious, extract(false), "case {case} suspicious");
    }

    // Ranking AUC against the O(n²) pair count.
    for case in 0..500 {
        let n = rng.gen_range(2..=60usize);
        let mut scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        if case % 4 == 0 {
            for v in scores.iter_mut() {
                *v = (*v * 10.0).round() / 10.0; // tied blocks
            }
        }
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.5) as u8).collect();
        labels[0] = 1; // both classes guaranteed present
        labels[1] = 0;
        let got = metrics::auc(&scores, &labels).unwrap();
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        assert!((got - wins / pairs).abs() < 1e-9, "case {case}: {got} vs {}", wins / pairs);
    }

    // Multi-label suite against direct formula evaluation (distinct scores so
    // the ranking is unambiguous).
    for case in 0..200 {
        let n = rng.gen_range(3..=40usize);
        let mut scores = vec![[0.0f64; 4]; n];
        let mut gts = vec![[0.0f64; 4]; n];
        for i in 0..n {
            for c in 0..4 {
                // Unique fractional tail per (sample, class): no ties, so the
                // oracle needs no tie-breaking convention.
                let tail = (i * 4 + c) as f64 / (4.0 * n as f64);
                scores[i][c] = (rng.gen_range(0..100_000) as f64 + tail) / 100_001.0;
                gts[i][c] = rng.gen_bool(0.4) as u8 as f64;
            }
        }
        gts[0] = [1.0, 1.0, 1.0, 1.0]; // every class has a positive
        let (map, cf1, of1) = metrics::multilabel_suite(&scores, &gts).unwrap();

        let mut ap_sum = 0.0;
        let mut cf1_sum = 0.0;
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for c in 0..4 {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b][c].total_cmp(&scores[a][c]));
            let (mut hits, mut ap) = (0.0, 0.0);
            for (rank, &i) in order.iter().enumerate() {
                if gts[i][c] == 1.0 {
                    hits += 1.0;
                    ap += hits / (rank + 1) as f64;
                }
            }
            ap_sum += ap / hits;
            let (mut ctp, mut cfp, mut cfn) = (0.0, 0.0, 0.0);
            for i in 0..n {
                match (scores[i][c] > 0.5, gts[i][c] == 1.0) {
                    (true, true) => ctp += 1.0,
                    (true, false) => cfp += 1.0,
                    (false, true) => cfn += 1.0,
                    _ => {}
                }
            }
            cf1_sum += if ctp > 0.0 { 2.0 * ctp / (2.0 * ctp + cfp + cfn) } else { 0.0 };
            tp += ctp;
            fp += cfp;
            fn_ += cfn;
        }
        let want_map = ap_sum / 4.0;
        let want_cf1 = cf1_sum / 4.0;
        let want_of1 = if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fn_) } else { 0.0 };
        assert!((map - want_map).abs() < 1e-9, "case {case} mAP {map} vs {want_map}");
        assert!((cf1 - want_cf1).abs() < 1e-9, "case {case} CF1 {cf1} vs {want_cf1}");
        assert!((of1 - want_of1).abs() < 1e-9, "case {case} OF1 {of1} vs {want_of1}");
    }

    // The classic overlapping-squares box: 1 unit of overlap, 7 of union.
    let v = metrics::iou_corner([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]);
    assert_eq!(v, 1.0 / 7.0);

    println!(
        "PASS oracle_equivalence: {gt_cases} label vectors, 1000 selections, \
         500 ranking sets, 200 multi-label sets, corner box = 1/7"
    );
}

#[test]
fn loss_sanity() {
    let store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(43);

    let mut worst_ln2 = 0.0f64;
    let mut worst_zero = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(1..=30usize);
        let gt: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();

        // Maximal ignorance: every prediction 1/2 costs exactly ln 2 per term.
        let mut g = Graph::new(&store);
        let p = g.constant_f64(n, 1, &vec![0.5; n]).unwrap();
        let l = consistency_loss(&mut g, p, &gt, None).unwrap();
        worst_ln2 = worst_ln2.max((g.value_f64(l)[0] - std::f64::consts::LN_2).abs());

        // Perfect agreement: only the clamp keeps the cost above zero.
        let mut g = Graph::new(&store);
        let p = g.constant_f64(n, 1, &gt).unwrap();
        let l = consistency_loss(&mut g, p, &gt, None).unwrap();
        worst_zero = worst_zero.max(g.value_f64(l)[0]);
    }
    assert!(worst_ln2 < 1e-12, "ln 2 off by {worst_ln2:.3e}");
    assert!(worst_zero < 1e-6, "perfect-prediction loss {worst_zero:.3e}");
    println!(
        "PASS loss_sanity: p=1/2 within {worst_ln2:.1e} of ln 2, \
         p=target costs {worst_zero:.1e} (< 1e-6)"
    );
}

#[test]
fn learnability() {
    let _g = heavy_lock();
    let t = trained();

    let mean = |f: fn(&EvalReport) -> f64| -> f64 {
        t.runs.iter().map(|r| f(&r.full)).sum::<f64>() / t.runs.len() as f64
    };
    let auc = mean(|r| r.auc);
    let f1 = mean(|r| r.f1);
    let iou = mean(|r| r.iou_m);
    for r in &t.runs {
        println!(
            "  seed {}: AUC {:.4}, token F1 {:.4}, IoU_m {:.4}, trained+evaluated in {:.0}s",
            r.seed, r.full.auc, r.full.f1, r.full.iou_m, r.full_secs
        );
        assert!(
            r.full_secs < 900.0,
            "seed {}: training + evaluation took {:.0}s, budget is 900s",
            r.seed,
            r.full_secs
        );
    }
    assert!(auc >= 0.90, "mean AUC {auc:.4} below 0.90");
    assert!(f1 >= 0.70, "mean token F1 {f1:.4} below 0.70");
    assert!(iou >= 0.50, "mean IoU_m {iou:.4} below 0.50");
    println!(
        "PASS learnability: mean AUC {auc:.4} (>= 0.90), token F1 {f1:.4} (>= 0.70), \
         IoU_m {iou:.4} (>= 0.50) over {} seeds, each run under 15 min",
        t.runs.len()
    );
}

#[test]
fn directional_improvement() {
    let _g = heavy_lock();
    let t = trained();
    for r in &t.runs {
        println!(
            "  seed {}: IoU_m {:.4} vs {:.4}, token F1 {:.4} vs {:.4} (full vs baseline)",
            r.seed, r.full.iou_m, r.base.iou_m, r.full.f1, r.base.f1
        );
        assert!(
            r.full.iou_m > r.base.iou_m,
            "seed {}: full IoU_m {:.4} does not beat baseline {:.4}",
            r.seed,
            r.full.iou_m,
            r.base.iou_m
        );
        assert!(
            r.full.f1 > r.base.f1,
            "seed {}: full token F1 {:.4} does not beat baseline {:.4}",
            r.seed,
            r.full.f1,
            r.base.f1
        );
    }
    println!(
        "PASS directional_improvement: full beats baseline on IoU_m and token F1 on all {} seeds",
        t.runs.len()
    );
}

#[test]
fn threshold_stability() {
    let _g = heavy_lock();
    let t = trained();
    let taus: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let rows = train::run_sweep(&t.runs[0].full_ckpt, &t.data.test, &taus).unwrap();

    println!("  tau,precision,recall,f1,flagged");
    for r in &rows {
        println!("  {:.2},{:.4},{:.4},{:.4},{}", r.tau, r.precision, r.recall, r.f1, r.flagged);
    }
    for w in rows.windows(2) {
        assert!(
            w[1].recall >= w[0].recall,
            "recall fell from {:.4} to {:.4} between tau {:.2} and {:.2}",
            w[0].recall,
            w[1].recall,
            w[0].tau,
            w[1].tau
        );
    }
    let band: Vec<f64> = rows
        .iter()
        .filter(|r| r.tau >= 0.3 - 1e-12 && r.tau <= 0.7 + 1e-12)
        .map(|r| r.f1)
        .collect();
    let hi = band.iter().cloned().fold(f64::MIN, f64::max);
    let lo = band.iter().cloned().fold(f64::MAX, f64::min);
    println!(
        "PASS threshold_stability: recall monotone over {} points, \
         F1 band over tau in [0.3, 0.7] spans [{lo:.4}, {hi:.4}] (width {:.4}, recorded)",
        rows.len(),
        hi - lo
    );
}

#[test]
fn determinism() {
    let _g = heavy_lock();
    let gen = GenConfig {
        train_count: 120,
        test_count: 60,
        grid: 4,
        token_len: 8,
        feature_dim: 16,
        seed: 44,
        ..GenConfig::default()
    };
    let data = generate_dataset(&gen).unwrap();
    let cfg = RunConfig {
        dim: 16,
        co_layers: 1,
        processor_depth: 1,
        k_image: 2,
        k_text: 2,
        epochs: 2,
        batch_size: 8,
        seed: 3,
        ..RunConfig::default()
    };

    let dir = tempfile::tempdir().unwrap();
    let mut artifacts = Vec::new();
    for run in 0..2 {
        let outcome = train::run_train(&cfg, &data.train).unwrap();
        let ckpt_path = dir.path().join(format!("run{run}.ckpt.json"));
        outcome.checkpoint.save(&ckpt_path).unwrap();
        let report = train::run_evaluate(&outcome.checkpoint, &data.test).unwrap();
        let report_bytes = serde_json::to_vec_pretty(&report).unwrap();
        artifacts.push((std::fs::read(&ckpt_path).unwrap(), report_bytes));
    }
    assert_eq!(artifacts[0].0, artifacts[1].0, "checkpoint bytes differ between runs");
    assert_eq!(artifacts[0].1, artifacts[1].1, "report bytes differ between runs");
    println!(
        "PASS determinism: repeated run produced byte-identical checkpoint ({} bytes) \
         and report ({} bytes)",
        artifacts[0].0.len(),
        artifacts[0].1.len()
    );
}

/// An untrained model must sit at chance on the default test split: its AUC
/// is a rank statistic, so random projections land in a band around 1/2.
#[test]
fn untrained_model_scores_at_chance() {
    let _g = heavy_lock();
    let data = dataset();
    let cfg = RunConfig::default();
    let mut aucs = Vec::new();
    for seed in 50..55u64 {
        let model: Model<f64> =
            Model::new(cfg.model_spec(32, 32), seed).unwrap();
        let report = train::evaluate(&model, &data.test).unwrap();
        assert!(
            (0.4..=0.6).contains(&report.auc),
            "seed {seed}: untrained AUC {:.4} outside [0.4, 0.6]",
            report.auc
        );
        aucs.push(report.auc);
    }
    println!("PASS untrained_model_scores_at_chance: AUCs {aucs:.4?} all within [0.4, 0.6]");
}

/// The documented desk defaults must actually descend out of the box: the
/// first five epoch means of the training loss strictly decrease.
#[test]
fn default_config_loss_descends() {
    let _g = heavy_lock();
    let data = dataset();
    let cfg = RunConfig { epochs: 5, ..RunConfig::default() };
    let outcome = train::run_train(&cfg, &data.train).unwrap();
    let totals: Vec<f64> = outcome.log.iter().map(|e| e.mean.total).collect();
    assert_eq!(totals.len(), 5);
    for w in totals.windows(2) {
        assert!(w[1] < w[0], "loss rose from {:.4} to {:.4}", w[0], w[1]);
    }
    println!("PASS default_config_loss_descends: epoch means {totals:.4?} strictly decreasing");
}
