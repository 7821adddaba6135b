use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use faerec::config::{RunConfig, KEYS};
use faerec::data::InteractionDataset;
use faerec::model::Model;
use faerec::params::ParameterStore;
use faerec::rng::derive_seed;
use faerec::semantic::load_semantic;
use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--set",
    "model.dim=8",
    "--set",
    "encoder.blocks=1",
    "--set",
    "train.batch_size=32",
];

fn faerec(args: &[&str]) -> Output {
    faerec_env(args, None)
}

fn faerec_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_faerec"));
    cmd.args(args).env_remove("FAEREC_SEED");
    if let Some(s) = seed {
        cmd.env("FAEREC_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic interactions, dataset and embeddings in a fresh directory.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Fixture {
        let f = Fixture {
            dir: TempDir::new().unwrap(),
        };
        ok(&faerec(&[
            "synth-data",
            "--output",
            s(&f.path("i.tsv")),
            "--users",
            "60",
            "--items",
            "40",
            "--seed",
            "3",
        ]));
        ok(&faerec(&[
            "preprocess",
            "--input",
            s(&f.path("i.tsv")),
            "--output",
            s(&f.dataset()),
        ]));
        ok(&faerec(&[
            "synth-embed",
            "--dataset",
            s(&f.dataset()),
            "--output",
            s(&f.embeddings()),
            "--d-llm",
            "16",
            "--key-clusters",
        ]));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn dataset(&self) -> PathBuf {
        self.path("d.fdat")
    }

    fn embeddings(&self) -> PathBuf {
        self.path("e.femb")
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (d, e, o) = (self.dataset(), self.embeddings(), self.path(out));
        let mut args = vec!["train", "--dataset", s(&d), "--embeddings", s(&e), "--out-dir", s(&o)];
        args.extend_from_slice(SMALL);
        args.extend_from_slice(extra);
        faerec(&args)
    }
}

#[test]
fn preprocess_prints_summary_and_is_idempotent() {
    let f = Fixture::new();
    let again = f.path("again.fdat");
    let out = ok(&faerec(&[
        "preprocess",
        "--input",
        s(&f.path("i.tsv")),
        "--output",
        s(&again),
    ]));
    let ds = InteractionDataset::read_fdat(&again).unwrap();
    assert_eq!(
        out.trim(),
        format!("users={} items={} head={}", ds.n_users(), ds.n_items(), ds.n_head())
    );
    assert_eq!(fs::read(f.dataset()).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn strict_preprocess_reports_the_bad_line() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("bad.tsv");
    fs::write(&input, "u1\ta\t1\nu1\tb\tnot-a-time\n").unwrap();
    let out = faerec(&[
        "preprocess",
        "--input",
        s(&input),
        "--output",
        s(&dir.path().join("x")),
        "--strict",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn lenient_preprocess_skips_bad_lines() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("mixed.tsv");
    fs::write(&input, "u1\ta\t1\ngarbage\nu1\tb\t2\nu1\tc\t3\n").unwrap();
    let out = faerec(&[
        "preprocess",
        "--input",
        s(&input),
        "--output",
        s(&dir.path().join("x.fdat")),
    ]);
    assert_eq!(ok(&out).trim(), "users=1 items=3 head=1");
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn synth_embed_is_deterministic_and_checks_clusters() {
    let f = Fixture::new();
    let (a, b) = (f.path("a.femb"), f.path("b.femb"));
    for p in [&a, &b] {
        ok(&faerec(&[
            "synth-embed",
            "--dataset",
            s(&f.dataset()),
            "--output",
            s(p),
        ]));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let store = load_semantic(&a, InteractionDataset::read_fdat(&f.dataset()).unwrap().n_items()).unwrap();
    assert_eq!(store.d_llm(), 64);

    let out = faerec(&[
        "synth-embed",
        "--dataset",
        s(&f.dataset()),
        "--output",
        s(&b),
        "--clusters",
        "1000",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cluster"));
}

#[test]
fn wide_llm_embeddings_are_accepted() {
    let f = Fixture::new();
    let out = f.path("wide.femb");
    ok(&faerec(&[
        "synth-embed",
        "--dataset",
        s(&f.dataset()),
        "--output",
        s(&out),
        "--d-llm",
        "1536",
    ]));
    let n = InteractionDataset::read_fdat(&f.dataset()).unwrap().n_items();
    assert_eq!(load_semantic(&out, n).unwrap().d_llm(), 1536);
}

#[test]
fn import_embed_orders_rows_by_dataset_ids() {
    let f = Fixture::new();
    let ds = InteractionDataset::read_fdat(&f.dataset()).unwrap();
    let tsv: String = ds
        .item_keys()
        .iter()
        .rev()
        .map(|k| format!("{k}\t{}.5,-1\n", k.trim_start_matches("item")))
        .collect();
    let (input, output) = (f.path("emb.tsv"), f.path("emb.femb"));
    fs::write(&input, tsv).unwrap();
    ok(&faerec(&[
        "import-embed",
        "--dataset",
        s(&f.dataset()),
        "--input",
        s(&input),
        "--output",
        s(&output),
    ]));
    let store = load_semantic(&output, ds.n_items()).unwrap();
    for (i, k) in ds.item_keys().iter().enumerate() {
        let expected: f64 = format!("{}.5", k.trim_start_matches("item")).parse().unwrap();
        assert_eq!(store.row(i), &[expected, -1.0]);
    }
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let f = Fixture::new();
    ok(&f.train("run", &["--epochs", "0"]));
    let saved = ParameterStore::load(&f.path("run").join("best.frec")).unwrap();

    let cfg = RunConfig::resolve(None, None, &["model.dim=8".into(), "encoder.blocks=1".into()]).unwrap();
    let ds = InteractionDataset::read_fdat(&f.dataset()).unwrap();
    let sem = load_semantic(&f.embeddings(), ds.n_items()).unwrap();
    let init = Model::init(cfg.model, &ds, Some(&sem), derive_seed(cfg.seed, &[2])).unwrap();
    assert_eq!(&saved, init.params());
}

#[test]
fn ablation_flags_map_to_config_keys() {
    let f = Fixture::new();
    ok(&f.train(
        "run",
        &[
            "--epochs",
            "1",
            "--ablation",
            "w/o_ila",
            "--ablation",
            "CLS",
            "--ablation",
            "no_agf",
            "--ablation",
            "pg",
        ],
    ));
    let text = fs::read_to_string(f.path("run").join("config.txt")).unwrap();
    let cfg = RunConfig::resolve(Some(&text), None, &[]).unwrap();
    assert!(!cfg.model.gate);
    assert_eq!(cfg.align.mode.to_string(), "no_ila+no_cls+no_pg");

    let out = f.train("bad", &["--epochs", "1", "--ablation", "xyz"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resume_continues_the_epoch_counter() {
    let f = Fixture::new();
    ok(&f.train("full", &["--epochs", "4"]));
    ok(&f.train("split", &["--epochs", "4", "--stop-after", "2"]));
    let partial = fs::read_to_string(f.path("split").join("metrics.csv")).unwrap();
    assert_eq!(partial.lines().count(), 3);
    ok(&f.train("split", &["--epochs", "4", "--resume"]));
    for file in ["metrics.csv", "best.frec", "last.frec"] {
        assert_eq!(
            fs::read(f.path("full").join(file)).unwrap(),
            fs::read(f.path("split").join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn resume_rejects_a_changed_configuration() {
    let f = Fixture::new();
    ok(&f.train("run", &["--epochs", "2", "--stop-after", "1"]));
    let out = f.train("run", &["--epochs", "2", "--resume", "--set", "train.lr=0.1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("resume"));
}

#[test]
fn training_is_deterministic() {
    let f = Fixture::new();
    ok(&f.train("a", &["--epochs", "2"]));
    ok(&f.train("b", &["--epochs", "2"]));
    assert_eq!(
        fs::read(f.path("a").join("metrics.csv")).unwrap(),
        fs::read(f.path("b").join("metrics.csv")).unwrap()
    );
}

#[test]
fn eval_of_untrained_checkpoint_prints_table_and_csv() {
    let f = Fixture::new();
    ok(&f.train("run", &["--epochs", "0"]));
    let csv = f.path("report.csv");
    let out = ok(&faerec(&[
        "eval",
        "--dataset",
        s(&f.dataset()),
        "--embeddings",
        s(&f.embeddings()),
        "--checkpoint",
        s(&f.path("run").join("best.frec")),
        "--k",
        "5,10",
        "--csv",
        s(&csv),
    ]));
    let header = out.lines().next().unwrap();
    for col in ["users", "H@5", "N@5", "H@10", "N@10"] {
        assert!(header.contains(col), "{header}");
    }
    assert!(out.lines().any(|l| l.starts_with("overall")));
    assert!(out.lines().any(|l| l.starts_with("tail")));
    let csv = fs::read_to_string(csv).unwrap();
    assert_eq!(csv.lines().next(), Some("metric,group,k,value"));
    assert!(csv.lines().any(|l| l.starts_with("HR,tail,10,")));
    assert!(!csv.lines().any(|l| l.contains(",20,")));
}

#[test]
fn dump_writes_three_views_per_item() {
    let f = Fixture::new();
    ok(&f.train("run", &["--epochs", "0"]));
    let dump = f.path("dump.tsv");
    ok(&faerec(&[
        "dump-embeddings",
        "--dataset",
        s(&f.dataset()),
        "--embeddings",
        s(&f.embeddings()),
        "--checkpoint",
        s(&f.path("run").join("best.frec")),
        "--output",
        s(&dump),
    ]));
    let n = InteractionDataset::read_fdat(&f.dataset()).unwrap().n_items();
    let text = fs::read_to_string(dump).unwrap();
    assert_eq!(text.lines().count(), 3 * n);
    for (line, view) in text.lines().take(3).zip(["id", "llm", "fused"]) {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields[1], view);
        assert_eq!(fields[2].split(',').count(), 8);
    }
}

#[test]
fn id_only_runs_without_embeddings() {
    let f = Fixture::new();
    let (d, out) = (f.dataset(), f.path("id"));
    let mut args = vec!["train", "--dataset", s(&d), "--out-dir", s(&out)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--set", "model.variant=id_only", "--epochs", "1"]);
    ok(&faerec(&args));
    ok(&faerec(&[
        "eval",
        "--dataset",
        s(&f.dataset()),
        "--checkpoint",
        s(&out.join("best.frec")),
    ]));

    let missing = faerec(&[
        "train",
        "--dataset",
        s(&f.dataset()),
        "--out-dir",
        s(&f.path("x")),
        "--epochs",
        "0",
    ]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn seed_precedence_is_file_then_env_then_flags() {
    let f = Fixture::new();
    let cfg_file = f.path("run.cfg");
    fs::write(&cfg_file, "seed = 5\nmodel.dim = 8\nencoder.blocks = 1\n").unwrap();
    let (d, e) = (f.dataset(), f.embeddings());
    let seed_of = |out: &str, env: Option<&str>, extra: &[&str]| {
        let o = f.path(out);
        let mut args = vec!["train", "--dataset", s(&d), "--embeddings", s(&e), "--out-dir", s(&o)];
        args.extend_from_slice(&["--config", s(&cfg_file), "--epochs", "0"]);
        args.extend_from_slice(extra);
        ok(&faerec_env(&args, env));
        let text = fs::read_to_string(o.join("config.txt")).unwrap();
        RunConfig::resolve(Some(&text), None, &[]).unwrap().seed
    };
    assert_eq!(seed_of("a", None, &[]), 5);
    assert_eq!(seed_of("b", Some("9"), &[]), 9);
    assert_eq!(seed_of("c", Some("9"), &["--set", "seed=11"]), 11);
}

#[test]
fn user_errors_exit_with_code_two() {
    let f = Fixture::new();
    let out = f.train("run", &["--set", "no.such.key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no.such.key"));

    let out = f.train("run", &["--set", "train.lr=-1"]);
    assert_eq!(out.status.code(), Some(2));

    let missing = faerec(&[
        "preprocess",
        "--input",
        "/nonexistent/in.tsv",
        "--output",
        s(&f.path("o")),
    ]);
    assert_eq!(missing.status.code(), Some(2));

    let garbage = f.path("garbage.frec");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = faerec(&[
        "eval",
        "--dataset",
        s(&f.dataset()),
        "--embeddings",
        s(&f.embeddings()),
        "--checkpoint",
        s(&garbage),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_every_key_with_its_default() {
    let defaults = RunConfig::default();
    for cmd in [&["--help"][..], &["train", "--help"], &["eval", "--help"]] {
        let help = ok(&faerec(cmd));
        for (key, _) in KEYS {
            let line = format!("  {key} = {}:", defaults.get(key).unwrap());
            assert!(help.contains(&line), "{cmd:?} help lacks {line:?}");
        }
    }
}
