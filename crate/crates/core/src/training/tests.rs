use super::*;
use crate::alignment::AlignMode;
use crate::autodiff::gradcheck::check_gradients;
use crate::data::build_dataset;
use crate::encoder::EncoderKind;
use crate::model::ModelConfig;
use crate::rng::normal_tensor;
use crate::semantic::synth_semantic_clustered;
use crate::synth::{synth_interactions, SynthConfig};

fn scalar(g: &Graph, v: Var) -> f64 {
    g.item(v).unwrap()
}

#[test]
fn rec_loss_at_zero_scores_is_two_ln_two() {
    let g = Graph::new();
    let h = g.constant(Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
    let e = g.constant(Tensor::matrix(2, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let l = scalar(&g, rec_loss(&g, h, e, e).unwrap());
    assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12 && (l - 1.38629).abs() < 1e-5);
}

#[test]
fn rec_loss_vanishes_under_perfect_separation() {
    let g = Graph::new();
    let h = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]));
    let pos = g.constant(Tensor::matrix(1, 2, vec![60.0, 0.0]));
    let neg = g.constant(Tensor::matrix(1, 2, vec![-60.0, 0.0]));
    assert!(scalar(&g, rec_loss(&g, h, pos, neg).unwrap()) < 1e-20);
}

#[test]
fn rec_loss_gradient_matches_finite_differences() {
    let mut rng = seeded(3);
    let inputs: Vec<Tensor> = (0..3).map(|_| normal_tensor(&mut rng, &[5, 8], 0.7)).collect();
    let check = check_gradients(&inputs, 1e-6, |g, v| rec_loss(g, v[0], v[1], v[2])).unwrap();
    assert!(check.max_rel_err() <= 1e-5, "{:?}", check.rel_err);
}

fn scalar_store(value: f64, grad: Option<f64>) -> ParameterStore {
    let mut s = ParameterStore::new();
    s.insert("x", Tensor::scalar(value));
    if let Some(gv) = grad {
        s.iter_mut().next().unwrap().grad = Some(Tensor::scalar(gv));
    }
    s
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let cfg = TrainConfig::default();
    for g in [3.0, -0.2] {
        let mut s = scalar_store(1.0, Some(g));
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &cfg).unwrap();
        let moved = s.get("x").unwrap().item().unwrap() - 1.0;
        assert!((moved + cfg.learning_rate * g.signum()).abs() < 1e-9, "{moved}");
    }
}

#[test]
fn adam_zero_gradient_is_a_no_op_and_missing_gradient_fails() {
    let cfg = TrainConfig::default();
    let mut s = scalar_store(0.25, Some(0.0));
    let mut st = AdamState::new(&s);
    for _ in 0..3 {
        adam_step(&mut s, &mut st, &cfg).unwrap();
    }
    assert_eq!(s.get("x").unwrap().item().unwrap(), 0.25);
    let mut missing = scalar_store(0.25, None);
    let mut st = AdamState::new(&missing);
    assert!(matches!(
        adam_step(&mut missing, &mut st, &cfg),
        Err(Error::Contract(_))
    ));
}

#[test]
fn batches_shift_targets_and_avoid_positive_negatives() {
    let prefixes: Vec<&[usize]> = vec![&[0, 1, 2], &[3], &[4, 0]];
    let b = make_batch(&prefixes, 5, &mut seeded(1)).unwrap().unwrap();
    assert_eq!(b.lens, vec![2, 1]);
    assert_eq!(b.inputs, vec![0, 1, 4]);
    assert_eq!(b.positives, vec![1, 2, 0]);
    for seed in 0..200 {
        let b = make_batch(&prefixes, 2, &mut seeded(seed)).unwrap().unwrap();
        assert!(b.negatives.iter().zip(&b.positives).all(|(n, p)| n != p && *n < 2));
    }
    assert!(make_batch(&[&[1]], 5, &mut seeded(0)).unwrap().is_none());
}

struct Fixture {
    dataset: InteractionDataset,
    semantic: SemanticStore,
}

fn fixture() -> Fixture {
    let synth = synth_interactions(&SynthConfig {
        n_users: 60,
        n_items: 30,
        n_clusters: 3,
        min_len: 4,
        max_len: 8,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let dataset = build_dataset(&synth.records, 3, 50).unwrap();
    let semantic = synth_semantic_clustered(&synth.assignment(&dataset).unwrap(), 3, 12, 4).unwrap();
    Fixture { dataset, semantic }
}

fn model_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        blocks: 1,
        d_ff: 16,
        encoder: EncoderKind::Attn,
        ..Default::default()
    }
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        learning_rate: 0.01,
        epochs,
        patience: 0,
        ..Default::default()
    }
}

fn align_config(mode: &str) -> AlignmentConfig {
    AlignmentConfig {
        period: 4,
        mode: mode.parse::<AlignMode>().unwrap(),
        ..Default::default()
    }
}

fn fresh(f: &Fixture) -> Model {
    Model::init(model_config(), &f.dataset, Some(&f.semantic), 11).unwrap()
}

fn sample_batch(f: &Fixture) -> Batch {
    let prefixes: Vec<Vec<usize>> = f.dataset.leave_one_out().users.into_iter().map(|u| u.train).collect();
    let refs: Vec<&[usize]> = prefixes.iter().take(12).map(|p| p.as_slice()).collect();
    make_batch(&refs, f.dataset.n_items(), &mut seeded(5)).unwrap().unwrap()
}

fn breakdown(f: &Fixture, cfg: &TrainConfig, align: &AlignmentConfig) -> LossBreakdown {
    let model = fresh(f);
    let g = Graph::new();
    let b = model.params().bind(&g);
    total_loss(
        &g,
        &model,
        &b,
        Some(&f.semantic),
        &sample_batch(f),
        f.dataset.popularity(),
        1,
        cfg,
        align,
    )
    .unwrap()
    .1
}

#[test]
fn total_loss_bookkeeping() {
    let f = fixture();
    let cfg = train_config(1);
    let full = breakdown(&f, &cfg, &align_config("full"));
    assert!(full.ila > 0.0 && full.fla > 0.0);
    let expected = full.rec + cfg.alpha * (full.w * full.ila + (1.0 - full.w) * full.fla);
    assert!((full.total - expected).abs() < 1e-9);

    let no_align = breakdown(
        &f,
        &TrainConfig {
            alpha: 0.0,
            ..cfg.clone()
        },
        &align_config("full"),
    );
    assert_eq!(no_align.total, no_align.rec);
    assert_eq!(no_align.rec, full.rec);

    let no_ila = breakdown(&f, &cfg, &align_config("no_ila"));
    assert_eq!(no_ila.ila, 0.0);
    assert!((no_ila.total - (no_ila.rec + cfg.alpha * no_ila.fla)).abs() < 1e-12);
}

#[test]
fn zero_epochs_return_the_initialization() {
    let f = fixture();
    let model = fresh(&f);
    let out = train(
        model.clone(),
        &f.dataset,
        Some(&f.semantic),
        &train_config(0),
        &align_config("full"),
        &TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(out.best, model);
    assert_eq!(out.last, model);
    assert!(out.log.is_empty());
}

#[test]
fn training_is_deterministic_and_leaves_semantics_alone() {
    let f = fixture();
    let before = f.semantic.clone();
    let run = || {
        train(
            fresh(&f),
            &f.dataset,
            Some(&f.semantic),
            &train_config(3),
            &align_config("full"),
            &TrainOptions::default(),
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.last.params(), b.last.params());
    assert_eq!(a.log, b.log);
    assert_eq!(f.semantic, before);
    assert_ne!(a.last.params(), fresh(&f).params());
}

#[test]
fn disabled_alignment_terms_match_alpha_zero() {
    let f = fixture();
    let opts = TrainOptions::default();
    let off = train(
        fresh(&f),
        &f.dataset,
        Some(&f.semantic),
        &train_config(2),
        &align_config("no_ila+no_fla"),
        &opts,
    )
    .unwrap();
    let zero = TrainConfig {
        alpha: 0.0,
        ..train_config(2)
    };
    let plain = train(
        fresh(&f),
        &f.dataset,
        Some(&f.semantic),
        &zero,
        &align_config("full"),
        &opts,
    )
    .unwrap();
    assert_eq!(off.last.params(), plain.last.params());
    let rows = |o: &TrainOutcome| o.log.iter().map(|e| (e.rec, e.valid_n10)).collect::<Vec<_>>();
    assert_eq!(rows(&off), rows(&plain));
}

#[test]
fn loss_goes_down() {
    let f = fixture();
    let out = train(
        fresh(&f),
        &f.dataset,
        Some(&f.semantic),
        &train_config(5),
        &align_config("full"),
        &TrainOptions::default(),
    )
    .unwrap();
    assert!(out.log[4].total < out.log[0].total, "{:?}", out.log);
    assert!(out
        .log
        .iter()
        .all(|e| e.rec.is_finite() && e.ila.is_finite() && e.fla.is_finite()));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let f = fixture();
    let cfg = train_config(4);
    let align = align_config("full");
    let straight_dir = tempfile::tempdir().unwrap();
    let straight = train(
        fresh(&f),
        &f.dataset,
        Some(&f.semantic),
        &cfg,
        &align,
        &TrainOptions {
            out_dir: Some(straight_dir.path().into()),
            ..Default::default()
        },
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = TrainOptions {
        out_dir: Some(dir.path().into()),
        resume: false,
        stop_after: Some(2),
    };
    let partial = train(fresh(&f), &f.dataset, Some(&f.semantic), &cfg, &align, &first).unwrap();
    assert_eq!(partial.log.len(), 2);
    let second = TrainOptions {
        resume: true,
        stop_after: None,
        ..first
    };
    let resumed = train(fresh(&f), &f.dataset, Some(&f.semantic), &cfg, &align, &second).unwrap();
    assert_eq!(resumed.log, straight.log);
    assert_eq!(resumed.last.params(), straight.last.params());
    assert_eq!(resumed.best.params(), straight.best.params());
    assert_eq!(
        fs::read(dir.path().join(METRICS_FILE)).unwrap(),
        fs::read(straight_dir.path().join(METRICS_FILE)).unwrap()
    );
    let best = ParameterStore::load(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(&best, straight.best.params());
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let f = fixture();
    let cfg = TrainConfig {
        patience: 1,
        learning_rate: 0.05,
        ..train_config(30)
    };
    let out = train(
        fresh(&f),
        &f.dataset,
        Some(&f.semantic),
        &cfg,
        &align_config("full"),
        &TrainOptions::default(),
    )
    .unwrap();
    let best = out.best_epoch.unwrap();
    let n10: Vec<f64> = out.log.iter().map(|e| e.valid_n10).collect();
    assert!(n10.iter().all(|&v| v <= n10[best]));
    if out.stopped_early {
        assert_eq!(out.log.len(), best + 2);
    }
}

#[test]
fn non_finite_loss_names_the_component() {
    let f = fixture();
    let mut model = fresh(&f);
    let mut table = model.params().get(crate::model::ITEM_TABLE).unwrap().clone();
    table.data_mut().fill(f64::NAN);
    model.params_mut().insert(crate::model::ITEM_TABLE, table);
    let err = train(
        model,
        &f.dataset,
        Some(&f.semantic),
        &train_config(1),
        &align_config("full"),
        &TrainOptions::default(),
    )
    .unwrap_err();
    match err {
        Error::NonFinite {
            component,
            epoch,
            batch,
        } => {
            assert_eq!((component, epoch, batch), ("rec".to_string(), 0, 0));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn id_only_baseline_trains_without_semantics() {
    let f = fixture();
    let cfg = ModelConfig {
        variant: Variant::IdOnly,
        ..model_config()
    };
    let model = Model::init(cfg, &f.dataset, None, 3).unwrap();
    let out = train(
        model,
        &f.dataset,
        None,
        &train_config(2),
        &align_config("full"),
        &TrainOptions::default(),
    )
    .unwrap();
    assert!(out.log.iter().all(|e| e.ila == 0.0 && e.fla == 0.0));
}

#[test]
fn alignment_ignores_the_gate() {
    let f = fixture();
    let batch = sample_batch(&f);
    let cfg = train_config(1);
    let align = align_config("full");
    let terms = |model: &Model| {
        let g = Graph::new();
        let b = model.params().bind(&g);
        total_loss(
            &g,
            model,
            &b,
            Some(&f.semantic),
            &batch,
            f.dataset.popularity(),
            1,
            &cfg,
            &align,
        )
        .unwrap()
        .1
    };
    let mut model = fresh(&f);
    for p in model.params_mut().iter_mut().filter(|p| p.name.starts_with("gate.")) {
        p.value.data_mut().fill(0.3);
    }
    let gated = terms(&model);
    for p in model.params_mut().iter_mut().filter(|p| p.name.starts_with("gate.")) {
        p.value.data_mut().fill(0.0);
    }
    let zeroed = terms(&model);
    assert_eq!(gated.align, zeroed.align);
    assert_ne!(gated.rec, zeroed.rec);
}
