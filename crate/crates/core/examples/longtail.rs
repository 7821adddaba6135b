//! Synthetic long-tail comparison of FAERec against the ID-only baseline.
//!
//! Usage: `cargo run --release --example longtail -- [key=value ...]` where
//! the keys are run-config keys (e.g. `train.epochs=20 model.dim=16`) or
//! `synth.min_len`, `synth.max_len`, `synth.stay` and `first_seed`.

use std::time::Instant;

use faerec::config::RunConfig;
use faerec::data::build_dataset;
use faerec::eval::{evaluate, ModelScorer, Split};
use faerec::model::{Model, Variant};
use faerec::rng::derive_seed;
use faerec::semantic::synth_semantic_clustered;
use faerec::synth::{synth_interactions, SynthConfig};
use faerec::training::{train, TrainOptions};

fn main() -> faerec::Result<()> {
    let mut overrides: Vec<String> = vec![
        "model.dim=32".into(),
        "encoder.blocks=1".into(),
        "train.epochs=50".into(),
        "train.batch_size=64".into(),
        "train.lr=0.005".into(),
        "train.patience=0".into(),
    ];
    let mut synth_cfg = SynthConfig::default();
    let mut first_seed = 0u64;
    for arg in std::env::args().skip(1) {
        match arg.split_once('=') {
            Some(("synth.min_len", v)) => synth_cfg.min_len = v.parse().expect("integer"),
            Some(("synth.max_len", v)) => synth_cfg.max_len = v.parse().expect("integer"),
            Some(("synth.stay", v)) => synth_cfg.stay = v.parse().expect("number"),
            Some(("first_seed", v)) => first_seed = v.parse().expect("integer"),
            _ => overrides.push(arg),
        }
    }
    let base = RunConfig::resolve(None, None, &overrides)?;
    for seed in first_seed..first_seed + 3 {
        let synth = synth_interactions(&SynthConfig {
            seed: derive_seed(seed, &[0]),
            ..synth_cfg.clone()
        })?;
        let ds = build_dataset(&synth.records, 3, 50)?;
        let sem = synth_semantic_clustered(&synth.assignment(&ds)?, 8, 64, derive_seed(seed, &[1]))?;
        for variant in [Variant::Faerec, Variant::IdOnly] {
            let start = Instant::now();
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.variant = variant;
            if variant == Variant::IdOnly {
                cfg.train.alpha = 0.0;
            }
            let store = (variant == Variant::Faerec).then_some(&sem);
            let model = Model::init(cfg.model.clone(), &ds, store, derive_seed(seed, &[2]))?;
            let out = train(
                model,
                &ds,
                store,
                &cfg.train_config(),
                &cfg.alignment(),
                &TrainOptions::default(),
            )?;
            let r = evaluate(&ModelScorer::new(&out.best, store)?, &ds, Split::Test, &cfg.eval)?;
            println!(
                "seed {seed} {variant:<8} best_epoch {:?} overall H@10 {:.4} tail H@10 {:.4} N@10 {:.4} head H@10 {:.4} TCov@10 {:.4} ({:.1}s)",
                out.best_epoch,
                r.hr(&r.overall, 10).unwrap(),
                r.hr(&r.tail, 10).unwrap(),
                r.ndcg(&r.tail, 10).unwrap(),
                r.hr(&r.head, 10).unwrap(),
                r.tail_coverage_at(10).unwrap(),
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
