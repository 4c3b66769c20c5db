use std::time::Instant;

use crosscheck_core::config::RunConfig;
use crosscheck_core::model::Model;
use crosscheck_core::synth::{generate_dataset, GenConfig};

fn main() {
    let gen = GenConfig::default();
    let t0 = Instant::now();
    let data = generate_dataset(&gen).unwrap();
    println!("gen 2000/500: {:?}", t0.elapsed());

    let cfg = RunConfig::default();
    let model: Model<f64> =
        Model::new(cfg.model_spec(gen.feature_dim, gen.feature_dim), cfg.seed).unwrap();
    println!("params: {}", model.store.flat_len());

    // warm
    for p in data.train.iter().take(3) {
        model.sample_gradient(p, cfg.loss_weights).unwrap();
    }
    let t1 = Instant::now();
    let n = 40;
    for p in data.train.iter().take(n) {
        model.sample_gradient(p, cfg.loss_weights).unwrap();
    }
    let per = t1.elapsed() / n as u32;
    println!("grad: {per:?}/sample -> epoch(2000) ~{:?}", per * 2000);

    let t2 = Instant::now();
    for p in data.test.iter().take(n) {
        model.trace(p).unwrap();
    }
    println!("trace: {:?}/sample", t2.elapsed() / n as u32);

    let arg = |i: usize, def: f64| -> f64 {
        std::env::args()
            .nth(i)
            .and_then(|s| s.parse().ok())
            .unwrap_or(def)
    };
    let epochs = arg(1, 10.0) as usize;
    let mut tcfg = RunConfig::default();
    tcfg.epochs = epochs;
    tcfg.learning_rate = arg(2, tcfg.learning_rate);
    tcfg.loss_weights[2] = arg(3, 1.0);
    tcfg.batch_size = arg(4, tcfg.batch_size as f64) as usize;
    tcfg.seed = arg(5, tcfg.seed as f64) as u64;
    tcfg.co_layers = arg(6, tcfg.co_layers as f64) as usize;
    tcfg.processor_depth = arg(7, tcfg.processor_depth as f64) as usize;
    tcfg.baseline = arg(8, 0.0) != 0.0;
    println!(
        "cfg: epochs {} lr {} bbox_w {} batch {} seed {} L {} depth {} baseline {}",
        tcfg.epochs,
        tcfg.learning_rate,
        tcfg.loss_weights[2],
        tcfg.batch_size,
        tcfg.seed,
        tcfg.co_layers,
        tcfg.processor_depth,
        tcfg.baseline
    );
    let t3 = Instant::now();
    let outcome = crosscheck_core::train::run_train(&tcfg, &data.train).unwrap();
    println!("train {} epochs: {:?}", epochs, t3.elapsed());
    for e in &outcome.log {
        println!(
            "  epoch {:2} total {:.4} bin {:.4} type {:.4} bbox {:.4} c {:.4} s {:.4}",
            e.epoch, e.mean.total, e.mean.l_binary, e.mean.l_type, e.mean.l_bbox, e.mean.l_c, e.mean.l_s
        );
    }
    let t4 = Instant::now();
    let report = crosscheck_core::train::run_evaluate(&outcome.checkpoint, &data.test).unwrap();
    println!("eval 500: {:?}", t4.elapsed());
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
}
