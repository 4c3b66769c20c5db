//! `crosscheck` — command-line harness for the consistency model.
//!
//! Subcommands cover the whole workflow: synthesize a corpus, train, evaluate,
//! run the ablation grid, sweep the token threshold, export analysis data,
//! and verify gradients against finite differences. Tables go out as CSV with
//! a header row; reports as JSON. Exit codes: 0 success, 2 validation
//! failure, 3 numeric failure.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crosscheck_core::analysis;
use crosscheck_core::config::RunConfig;
use crosscheck_core::error::{Error, Result};
use crosscheck_core::gradcheck;
use crosscheck_core::heads::SampleTargets;
use crosscheck_core::metrics::EvalReport;
use crosscheck_core::model::{wire_forward, BranchToggles, Model, ModelSpec};
use crosscheck_core::synth::{self, GenConfig};
use crosscheck_core::tape::Graph;
use crosscheck_core::train::{self, Checkpoint};

#[derive(Parser)]
#[command(name = "crosscheck", version, about = "Train and evaluate a consistency-based manipulation detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedOverride {
    /// Override the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (train and test JSONL plus metadata).
    GenData {
        /// Generator config (JSON); omit for the built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for train.jsonl / test.jsonl.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedOverride,
    },
    /// Train a model and save the checkpoint.
    Train {
        /// Run config (JSON); omit for desk-scale defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training data (JSONL); overrides the config's train_data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-epoch loss log as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedOverride,
    },
    /// Evaluate a checkpoint and write the metric report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Evaluation data (JSONL); overrides the config's test_data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report output path (JSON).
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate every branch-toggle variant; write the grid as CSV.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training data (JSONL); overrides the config's train_data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluation data (JSONL); overrides the config's test_data.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Grid output path (CSV).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedOverride,
    },
    /// Token precision/recall/F1 across a grid of thresholds.
    SweepThreshold {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated thresholds; default 0.05 steps over [0,1].
        #[arg(long)]
        taus: Option<String>,
        /// Sweep output path (CSV).
        #[arg(long)]
        out: PathBuf,
    },
    /// Export consistency-matrix heatmaps and PCA scatter data.
    ExportAnalysis {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out_dir: PathBuf,
        /// How many samples get per-sample matrix heatmaps.
        #[arg(long, default_value_t = 8)]
        heatmaps: usize,
    },
    /// Verify analytic gradients against central finite differences on a
    /// small randomly-initialized model.
    GradCheck {
        /// Number of parameter coordinates to probe.
        #[arg(long, default_value_t = 200)]
        coords: usize,
        /// Maximum relative error accepted.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[command(flatten)]
        seed: SeedOverride,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_run_config(path: &Option<PathBuf>, seed: &SeedOverride) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_pairs(
    explicit: &Option<PathBuf>,
    from_config: &std::path::Path,
) -> Result<Vec<crosscheck_core::synth::MediaPair>> {
    let path = explicit.as_deref().unwrap_or(from_config);
    synth::load_pairs(path)
}

fn write_text(path: &std::path::Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, text.as_bytes())?;
    Ok(())
}

fn epoch_log_csv(log: &[train::EpochLog]) -> String {
    let mut s = String::from("epoch,total,l_binary,l_type,l_bbox,l_c,l_s\n");
    for e in log {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            e.epoch, e.mean.total, e.mean.l_binary, e.mean.l_type, e.mean.l_bbox, e.mean.l_c, e.mean.l_s
        );
    }
    s
}

fn report_summary(r: &EvalReport) -> String {
    format!(
        "auc {:.4}  eer {:.4}  acc {:.4}  map {:.4}  iou_m {:.4}  token_f1 {:.4}  ({} samples)",
        r.auc, r.eer, r.acc, r.map, r.iou_m, r.f1, r.samples
    )
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out, seed } => {
            let mut gen = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)?;
                    let cfg: GenConfig = serde_json::from_str(&text)
                        .map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?;
                    cfg
                }
                None => GenConfig::default(),
            };
            if let Some(s) = seed.seed {
                gen.seed = s;
            }
            gen.validate()?;
            std::fs::create_dir_all(&out)?;
            let data = synth::generate_dataset(&gen)?;
            let train_path = out.join("train.jsonl");
            let test_path = out.join("test.jsonl");
            let train_meta = synth::save_pairs(&train_path, &data.train, &gen)?;
            let test_meta = synth::save_pairs(&test_path, &data.test, &gen)?;
            println!(
                "{}: {} samples, sha256 {}",
                train_path.display(),
                train_meta.samples,
                train_meta.sha256
            );
            println!(
                "{}: {} samples, sha256 {}",
                test_path.display(),
                test_meta.samples,
                test_meta.sha256
            );
        }
        Command::Train { config, data, out, log, seed } => {
            let cfg = load_run_config(&config, &seed)?;
            let pairs = load_pairs(&data, &cfg.train_data)?;
            let outcome = train::run_train(&cfg, &pairs)?;
            outcome.checkpoint.save(&out)?;
            let csv = epoch_log_csv(&outcome.log);
            if let Some(log_path) = log {
                write_text(&log_path, &csv)?;
            }
            print!("{csv}");
            println!("checkpoint {} sha256 {}", out.display(), outcome.checkpoint.sha256);
        }
        Command::Eval { ckpt, data, report } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let pairs = load_pairs(&data, &ckpt.config.test_data)?;
            let r = train::run_evaluate(&ckpt, &pairs)?;
            write_text(&report, &serde_json::to_string_pretty(&r)?)?;
            println!("{}", report_summary(&r));
        }
        Command::Ablate { config, data, test, out, seed } => {
            let cfg = load_run_config(&config, &seed)?;
            let train_pairs = load_pairs(&data, &cfg.train_data)?;
            let test_pairs = load_pairs(&test, &cfg.test_data)?;
            let rows = train::ablate(&cfg, &train_pairs, &test_pairs)?;
            let mut csv = String::from(
                "label,contextual_image,contextual_text,semantic_image,semantic_text,\
                 auc,eer,acc,map,cf1,of1,iou_m,iou50,iou75,precision,recall,f1\n",
            );
            for r in &rows {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    r.label,
                    r.contextual_image as u8,
                    r.contextual_text as u8,
                    r.semantic_image as u8,
                    r.semantic_text as u8,
                    r.report.auc,
                    r.report.eer,
                    r.report.acc,
                    r.report.map,
                    r.report.cf1,
                    r.report.of1,
                    r.report.iou_m,
                    r.report.iou50,
                    r.report.iou75,
                    r.report.precision,
                    r.report.recall,
                    r.report.f1
                );
            }
            write_text(&out, &csv)?;
            for r in &rows {
                println!("{:16} {}", r.label, report_summary(&r.report));
            }
        }
        Command::SweepThreshold { ckpt, data, taus, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let pairs = load_pairs(&data, &ckpt.config.test_data)?;
            let taus: Vec<f64> = match taus {
                Some(list) => list
                    .split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Validation(format!("bad threshold {t:?}")))
                    })
                    .collect::<Result<_>>()?,
                None => (0..=20).map(|i| i as f64 / 20.0).collect(),
            };
            let rows = train::run_sweep(&ckpt, &pairs, &taus)?;
            let mut csv = String::from("tau,precision,recall,f1,flagged\n");
            for r in &rows {
                let _ = writeln!(csv, "{},{},{},{},{}", r.tau, r.precision, r.recall, r.f1, r.flagged);
            }
            write_text(&out, &csv)?;
            let band: Vec<&train::SweepRow> =
                rows.iter().filter(|r| r.tau >= 0.3 && r.tau <= 0.7).collect();
            if !band.is_empty() {
                let hi = band.iter().map(|r| r.f1).fold(f64::MIN, f64::max);
                let lo = band.iter().map(|r| r.f1).fold(f64::MAX, f64::min);
                println!("f1 stability band over tau in [0.3,0.7]: max-min = {}", hi - lo);
            }
            println!("{} rows -> {}", rows.len(), out.display());
        }
        Command::ExportAnalysis { ckpt, data, out_dir, heatmaps } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let pairs = load_pairs(&data, &ckpt.config.test_data)?;
            let summary = analysis::export_analysis(&ckpt, &pairs, &out_dir, heatmaps)?;
            for (name, stats) in &summary.populations {
                println!(
                    "{name}: {} points, top eigenvalues {:?}, explained {:.3}",
                    stats.points, stats.eigenvalues, stats.explained_variance
                );
            }
            println!("{} files -> {}", summary.files.len(), out_dir.display());
        }
        Command::GradCheck { coords, tolerance, step, seed } => {
            let outcome = grad_check_small(coords, tolerance, step, seed.seed.unwrap_or(17))?;
            println!(
                "checked {} coordinates, max relative error {:.3e} (parameter {}, coordinate {})",
                outcome.checked, outcome.max_rel_err, outcome.worst_param, outcome.worst_coord
            );
        }
    }
    Ok(())
}

/// Builds a small full model on one synthetic pair and verifies the analytic
/// gradient of the total loss at `coords` random coordinates.
fn grad_check_small(
    coords: usize,
    tolerance: f64,
    step: f64,
    seed: u64,
) -> Result<gradcheck::GradCheckOutcome> {
    let gen = GenConfig {
        train_count: 1,
        test_count: 1,
        grid: 3,
        token_len: 6,
        feature_dim: 8,
        genuine_fraction: 0.0,
        seed,
        ..GenConfig::default()
    };
    let pair = synth::generate_dataset(&gen)?
        .train
        .into_iter()
        .next()
        .ok_or_else(|| Error::Validation("empty synthetic split".into()))?;

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
    let model: Model<f64> = Model::new(spec, seed)?;
    let (_, analytic) = model.sample_gradient(&pair, weights)?;
    let picked = gradcheck::sample_coords(model.store.flat_len(), coords, seed);

    let Model { mut store, arch, spec } = model;
    let targets = SampleTargets::from_pair(&pair);
    let outcome = gradcheck::grad_check(&mut store, &analytic, &picked, step, |st| {
        let mut g = Graph::new(st);
        let (preds, _) = wire_forward(&arch, spec.tau, &mut g, &pair)?;
        let (total, _) = crosscheck_core::heads::subtask_losses(&mut g, &preds, &targets, weights)?;
        Ok(g.value_f64(total)[0])
    })?;
    if outcome.max_rel_err >= tolerance {
        return Err(Error::Numeric(format!(
            "gradient mismatch: max relative error {:.3e} at parameter {} (coordinate {}), tolerance {tolerance:.1e}",
            outcome.max_rel_err, outcome.worst_param, outcome.worst_coord
        )));
    }
    Ok(outcome)
}
