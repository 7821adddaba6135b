//! `faerec` command-line tool: preprocessing, synthetic inputs, training,
//! evaluation and embedding export.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;

use clap::{Args, Parser, Subcommand};
use faerec::alignment::AlignMode;
use faerec::config::{RunConfig, SEED_ENV};
use faerec::data::{build_dataset, load_interactions, InteractionDataset, DEFAULT_MAX_SEQ_LEN, DEFAULT_MIN_SEQ_LEN};
use faerec::eval::{evaluate, ModelScorer, Split};
use faerec::model::{Model, Variant};
use faerec::params::ParameterStore;
use faerec::rng::derive_seed;
use faerec::semantic::{load_semantic, parse_embedding_tsv, synth_semantic, synth_semantic_clustered, SemanticStore};
use faerec::synth::{synth_interactions, SynthConfig};
use faerec::training::{train, TrainOptions, BEST_CHECKPOINT};
use faerec::{Error, Result};

/// Name of the resolved configuration written next to the checkpoints.
const CONFIG_FILE: &str = "config.txt";

const EXIT_USER: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

fn config_help() -> &'static str {
    static HELP: OnceLock<String> = OnceLock::new();
    HELP.get_or_init(|| {
        format!(
            "{}\nThe {SEED_ENV} environment variable overrides the seed of the config file; \
             --set and command flags override both.",
            RunConfig::help_text()
        )
    })
}

#[derive(Parser, Debug)]
#[command(
    name = "faerec",
    version,
    about = "Semantic-aligned sequential recommendation for long-tail items"
)]
#[command(after_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Turn a user<TAB>item<TAB>timestamp file into an FDAT dataset.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic long-tail interaction file.
    SynthData(SynthDataArgs),
    /// Generate cluster-structured synthetic item embeddings.
    SynthEmbed(SynthEmbedArgs),
    /// Convert item_key<TAB>v1,v2,... embeddings into FEMB for a dataset.
    ImportEmbed(ImportEmbedArgs),
    /// Train a model and write checkpoints plus a metrics log.
    #[command(after_help = config_help())]
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out test or validation items.
    #[command(after_help = config_help())]
    Eval(EvalArgs),
    /// Write the ID, semantic and fused item embeddings of a checkpoint.
    DumpEmbeddings(DumpArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Drop users with fewer interactions.
    #[arg(long, default_value_t = DEFAULT_MIN_SEQ_LEN)]
    min_len: usize,
    /// Keep only the most recent interactions of each user.
    #[arg(long, default_value_t = DEFAULT_MAX_SEQ_LEN)]
    max_len: usize,
    /// Fail on the first malformed line instead of skipping it.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct SynthDataArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 500)]
    users: usize,
    #[arg(long, default_value_t = 200)]
    items: usize,
    #[arg(long, default_value_t = 8)]
    clusters: usize,
    /// Exponent of the Zipf popularity weights.
    #[arg(long, default_value_t = 1.2)]
    zipf: f64,
    #[arg(long, default_value_t = 5)]
    min_len: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    /// Probability of staying in the current cluster at each step.
    #[arg(long, default_value_t = 0.9)]
    stay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SynthEmbedArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 64)]
    d_llm: usize,
    #[arg(long, default_value_t = 8)]
    clusters: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Take each item's cluster from its key: `item<k>` joins cluster
    /// k mod clusters, matching `synth-data`. Otherwise dense id i joins
    /// cluster i mod clusters.
    #[arg(long)]
    key_clusters: bool,
}

#[derive(Args, Debug)]
struct ImportEmbedArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

/// Configuration sources shared by the commands that build a model.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.lr=0.0005 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// FEMB semantic embeddings; required by the faerec variant.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Switch off a component: agf, ila, fla, cls or pg (repeatable;
    /// `w/o_ila` and `no_ila` spellings are accepted).
    #[arg(long, value_name = "COMPONENT")]
    ablation: Vec<String>,
    /// Shorthand for --set train.epochs=N.
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from the last checkpoint in --out-dir.
    #[arg(long)]
    resume: bool,
    /// Stop this invocation after N epochs, leaving a resumable checkpoint.
    #[arg(long, value_name = "N")]
    stop_after: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// FREC checkpoint. Its directory's config.txt is used when --config is
    /// not given.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated cut-offs; shorthand for --set eval.k=...
    #[arg(long)]
    k: Option<String>,
    #[arg(long, default_value = "test", value_parser = ["test", "valid"])]
    split: String,
    /// Also write the report as metric,group,k,value rows.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// TSV output: item_key, view (id, llm or fused), comma-separated values.
    #[arg(long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { EXIT_USER } else { EXIT_INTERNAL })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Preprocess(a) => preprocess(a),
        Command::SynthData(a) => synth_data(a),
        Command::SynthEmbed(a) => synth_embed(a),
        Command::ImportEmbed(a) => import_embed(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::DumpEmbeddings(a) => dump_embeddings(a),
    }
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let loaded = load_interactions(&a.input, a.strict)?;
    if let Some(first) = loaded.malformed.first() {
        eprintln!(
            "skipped {} malformed line(s), first at line {first}",
            loaded.malformed.len()
        );
    }
    let ds = build_dataset(&loaded.records, a.min_len, a.max_len)?;
    ds.write_fdat(&a.output)?;
    println!("users={} items={} head={}", ds.n_users(), ds.n_items(), ds.n_head());
    Ok(())
}

fn synth_data(a: SynthDataArgs) -> Result<()> {
    let synth = synth_interactions(&SynthConfig {
        n_users: a.users,
        n_items: a.items,
        n_clusters: a.clusters,
        zipf: a.zipf,
        min_len: a.min_len,
        max_len: a.max_len,
        stay: a.stay,
        seed: a.seed,
    })?;
    let mut w = BufWriter::new(File::create(&a.output)?);
    for r in &synth.records {
        writeln!(w, "{}\t{}\t{}", r.user, r.item, r.timestamp)?;
    }
    w.flush()?;
    println!("interactions={}", synth.records.len());
    Ok(())
}

fn synth_embed(a: SynthEmbedArgs) -> Result<()> {
    let ds = InteractionDataset::read_fdat(&a.dataset)?;
    let store = if a.key_clusters {
        if a.clusters == 0 || a.clusters > ds.n_items() {
            return Err(Error::Config(format!(
                "cluster count {} must be between 1 and the item count {}",
                a.clusters,
                ds.n_items()
            )));
        }
        let assignment = ds
            .item_keys()
            .iter()
            .map(|k| {
                k.strip_prefix("item")
                    .and_then(|n| n.parse::<usize>().ok())
                    .map(|n| n % a.clusters)
                    .ok_or_else(|| Error::Consistency(format!("item key {k:?} is not of the form item<k>")))
            })
            .collect::<Result<Vec<_>>>()?;
        synth_semantic_clustered(&assignment, a.clusters, a.d_llm, a.seed)?
    } else {
        synth_semantic(ds.n_items(), a.d_llm, a.clusters, a.seed)?
    };
    store.write_femb(&a.output)?;
    println!("items={} d_llm={}", store.n_items(), store.d_llm());
    Ok(())
}

fn import_embed(a: ImportEmbedArgs) -> Result<()> {
    let ds = InteractionDataset::read_fdat(&a.dataset)?;
    let store = parse_embedding_tsv(BufReader::new(File::open(&a.input)?), ds.item_keys())?;
    store.write_femb(&a.output)?;
    println!("items={} d_llm={}", store.n_items(), store.d_llm());
    Ok(())
}

/// Maps a component name onto the config override that removes it.
fn ablation_override(name: &str, mode: &mut AlignMode) -> Result<Option<String>> {
    let lower = name.trim().to_ascii_lowercase();
    let core = ["w/o_", "w/o ", "w/o", "no_"]
        .iter()
        .find_map(|p| lower.strip_prefix(p))
        .unwrap_or(&lower)
        .trim();
    match core {
        "agf" => return Ok(Some("model.gate=false".into())),
        "ila" => mode.no_ila = true,
        "fla" => mode.no_fla = true,
        "cls" => mode.no_cls = true,
        "pg" => mode.no_pg = true,
        _ => {
            return Err(Error::Config(format!(
                "unknown ablation {name:?}; expected agf, ila, fla, cls or pg"
            )))
        }
    }
    Ok(None)
}

fn resolve_config(args: &ConfigArgs, fallback: Option<&Path>, extra: &[String]) -> Result<RunConfig> {
    let path = args.config.as_deref().or(fallback.filter(|p| p.exists()));
    let text = path.map(fs::read_to_string).transpose()?;
    let env_seed = std::env::var(SEED_ENV).ok();
    let mut overrides = args.overrides.clone();
    overrides.extend_from_slice(extra);
    RunConfig::resolve(text.as_deref(), env_seed.as_deref(), &overrides)
}

fn semantic_for(cfg: &RunConfig, path: Option<&Path>, n_items: usize) -> Result<Option<SemanticStore>> {
    match (cfg.model.variant, path) {
        (Variant::IdOnly, _) => Ok(None),
        (Variant::Faerec, Some(p)) => load_semantic(p, n_items).map(Some),
        (Variant::Faerec, None) => Err(Error::Config("the faerec variant needs --embeddings".into())),
    }
}

/// A resumed run must use the configuration it started with; only the
/// epoch budget may grow.
fn check_resume_config(saved: &str, cfg: &RunConfig) -> Result<()> {
    let mut before = RunConfig::resolve(Some(saved), None, &[])?;
    before.train.epochs = cfg.train.epochs;
    if before != *cfg {
        return Err(Error::Config(format!(
            "--resume with a configuration that differs from the saved {CONFIG_FILE} (only train.epochs may change)"
        )));
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(n) = a.epochs {
        extra.push(format!("train.epochs={n}"));
    }
    let mut cfg = resolve_config(&a.config, None, &extra)?;
    let mut mode = cfg.align.mode;
    for name in &a.ablation {
        if let Some(kv) = ablation_override(name, &mut mode)? {
            cfg.apply_override(&kv)?;
        }
    }
    cfg.align.mode = mode;
    cfg.validate()?;

    let ds = InteractionDataset::read_fdat(&a.dataset)?;
    let semantic = semantic_for(&cfg, a.embeddings.as_deref(), ds.n_items())?;
    fs::create_dir_all(&a.out_dir)?;
    let config_path = a.out_dir.join(CONFIG_FILE);
    if a.resume && config_path.exists() {
        check_resume_config(&fs::read_to_string(&config_path)?, &cfg)?;
    }
    fs::write(&config_path, cfg.to_text())?;

    let model = Model::init(cfg.model.clone(), &ds, semantic.as_ref(), derive_seed(cfg.seed, &[2]))?;
    let opts = TrainOptions {
        out_dir: Some(a.out_dir.clone()),
        resume: a.resume,
        stop_after: a.stop_after,
    };
    let out = train(
        model,
        &ds,
        semantic.as_ref(),
        &cfg.train_config(),
        &cfg.alignment(),
        &opts,
    )?;
    for e in &out.log {
        println!(
            "epoch {:>4} rec {:.6} ila {:.6} fla {:.6} w {:.4} valid H@10 {:.4} N@10 {:.4}",
            e.epoch, e.rec, e.ila, e.fla, e.w, e.valid_hr10, e.valid_n10
        );
    }
    match out.best_epoch {
        Some(b) => println!("best epoch {b}; checkpoints in {}", a.out_dir.display()),
        None => println!(
            "no epoch ran; {} holds the initialization",
            a.out_dir.join(BEST_CHECKPOINT).display()
        ),
    }
    if out.stopped_early {
        println!("stopped early after {} epochs", out.log.len());
    }
    Ok(())
}

fn load_model(
    dataset: &Path,
    embeddings: Option<&Path>,
    checkpoint: &Path,
    config: &ConfigArgs,
    extra: &[String],
) -> Result<(InteractionDataset, Option<SemanticStore>, Model, RunConfig)> {
    let sibling = checkpoint.parent().map(|d| d.join(CONFIG_FILE));
    let cfg = resolve_config(config, sibling.as_deref(), extra)?;
    let ds = InteractionDataset::read_fdat(dataset)?;
    let semantic = semantic_for(&cfg, embeddings, ds.n_items())?;
    let model = Model::from_params(cfg.model.clone(), ParameterStore::load(checkpoint)?)?;
    Ok((ds, semantic, model, cfg))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let extra: Vec<String> = a.k.iter().map(|k| format!("eval.k={k}")).collect();
    let (ds, semantic, model, cfg) = load_model(&a.dataset, a.embeddings.as_deref(), &a.checkpoint, &a.config, &extra)?;
    let split = if a.split == "valid" { Split::Valid } else { Split::Test };
    let report = evaluate(&ModelScorer::new(&model, semantic.as_ref())?, &ds, split, &cfg.eval)?;
    print!("{report}");
    if let Some(path) = &a.csv {
        let mut w = BufWriter::new(File::create(path)?);
        report.write_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn dump_embeddings(a: DumpArgs) -> Result<()> {
    let (ds, semantic, model, _) = load_model(&a.dataset, a.embeddings.as_deref(), &a.checkpoint, &a.config, &[])?;
    let (e_id, e_llm, fused) = model.embedding_dump(semantic.as_ref())?;
    let mut w = BufWriter::new(File::create(&a.output)?);
    let mut views = vec![("id", &e_id)];
    if let Some(t) = &e_llm {
        views.push(("llm", t));
    }
    views.push(("fused", &fused));
    for (i, key) in ds.item_keys().iter().enumerate() {
        for (view, t) in &views {
            let d = t.shape()[1];
            let row = &t.data()[i * d..(i + 1) * d];
            let values: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{key}\t{view}\t{}", values.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}
