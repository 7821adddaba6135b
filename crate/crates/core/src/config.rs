//! Run configuration as `key = value` text.
//!
//! Values are layered: built-in defaults, then a config file, then the
//! `FAEREC_SEED` environment variable, then command-line overrides.

use std::fmt::Write as _;

use crate::alignment::{AlignMode, AlignmentConfig};
use crate::encoder::EncoderKind;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::model::{ModelConfig, Variant};
use crate::training::TrainConfig;

pub const SEED_ENV: &str = "FAEREC_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub align: AlignmentConfig,
    /// Curriculum period in epochs; 0 means one cycle over `train.epochs`.
    pub align_period: usize,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            align: AlignmentConfig::default(),
            align_period: 0,
            eval: EvalOptions::default(),
        }
    }
}

/// Every key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master random seed"),
    ("model.variant", "faerec | id_only"),
    ("model.dim", "embedding size d"),
    (
        "model.gate",
        "adaptive gated fusion during training (false: equal fusion)",
    ),
    ("encoder.kind", "attn | last"),
    ("encoder.blocks", "self-attention blocks"),
    ("encoder.d_ff", "feed-forward width, 0 = 4*dim"),
    ("train.batch_size", "users per mini-batch"),
    ("train.lr", "Adam learning rate"),
    ("train.beta1", "Adam first-moment decay"),
    ("train.beta2", "Adam second-moment decay"),
    ("train.adam_eps", "Adam denominator epsilon"),
    ("train.epochs", "training epochs"),
    ("train.alpha", "alignment loss weight"),
    ("train.patience", "early-stop patience on validation N@10, 0 = off"),
    ("align.tau", "InfoNCE temperature"),
    ("align.lambda", "off-diagonal redundancy weight"),
    ("align.w_max", "curriculum upper bound"),
    ("align.w_min", "curriculum lower bound"),
    ("align.period", "curriculum period in epochs, 0 = train.epochs"),
    ("align.grouping", "split batches at median popularity"),
    ("align.eps_std", "standardization epsilon"),
    ("align.mode", "full or a '+' join of no_ila, no_fla, no_cls, no_pg"),
    ("eval.k", "comma-separated cut-offs"),
    ("eval.exclude_seen", "drop training-prefix items from candidates"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn format_ks(ks: &[usize]) -> String {
    ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "model.variant" => self.model.variant = v.parse::<Variant>()?,
            "model.dim" => self.model.dim = parse(key, v)?,
            "model.gate" => self.model.gate = parse_bool(key, v)?,
            "encoder.kind" => self.model.encoder = v.parse::<EncoderKind>()?,
            "encoder.blocks" => self.model.blocks = parse(key, v)?,
            "encoder.d_ff" => self.model.d_ff = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.learning_rate = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.adam_eps" => self.train.adam_eps = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.alpha" => self.train.alpha = parse(key, v)?,
            "train.patience" => self.train.patience = parse(key, v)?,
            "align.tau" => self.align.tau = parse(key, v)?,
            "align.lambda" => self.align.lambda = parse(key, v)?,
            "align.w_max" => self.align.w_max = parse(key, v)?,
            "align.w_min" => self.align.w_min = parse(key, v)?,
            "align.period" => self.align_period = parse(key, v)?,
            "align.grouping" => self.align.grouping = parse_bool(key, v)?,
            "align.eps_std" => self.align.eps_std = parse(key, v)?,
            "align.mode" => self.align.mode = v.parse::<AlignMode>()?,
            "eval.k" => {
                self.eval.ks = v
                    .split(',')
                    .map(|k| parse(key, k.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "eval.exclude_seen" => self.eval.exclude_seen = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "seed" => self.seed.to_string(),
            "model.variant" => self.model.variant.to_string(),
            "model.dim" => self.model.dim.to_string(),
            "model.gate" => self.model.gate.to_string(),
            "encoder.kind" => self.model.encoder.to_string(),
            "encoder.blocks" => self.model.blocks.to_string(),
            "encoder.d_ff" => self.model.d_ff.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.lr" => self.train.learning_rate.to_string(),
            "train.beta1" => self.train.beta1.to_string(),
            "train.beta2" => self.train.beta2.to_string(),
            "train.adam_eps" => self.train.adam_eps.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.alpha" => self.train.alpha.to_string(),
            "train.patience" => self.train.patience.to_string(),
            "align.tau" => self.align.tau.to_string(),
            "align.lambda" => self.align.lambda.to_string(),
            "align.w_max" => self.align.w_max.to_string(),
            "align.w_min" => self.align.w_min.to_string(),
            "align.period" => self.align_period.to_string(),
            "align.grouping" => self.align.grouping.to_string(),
            "align.eps_std" => self.align.eps_std.to_string(),
            "align.mode" => self.align.mode.to_string(),
            "eval.k" => format_ks(&self.eval.ks),
            "eval.exclude_seen" => self.eval.exclude_seen.to_string(),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        })
    }

    /// Applies `key = value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(key, value)
    }

    /// Layers the file, the seed environment variable and the overrides over
    /// the defaults, then validates.
    pub fn resolve(file_text: Option<&str>, env_seed: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(text) = file_text {
            cfg.apply_text(text)?;
        }
        if let Some(seed) = env_seed {
            cfg.set("seed", seed)
                .map_err(|_| Error::Config(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
        }
        for kv in overrides {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        self.alignment().validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.k must list positive cut-offs".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            exclude_seen: self.eval.exclude_seen,
            ..self.train.clone()
        }
    }

    /// Alignment settings with the curriculum period resolved.
    pub fn alignment(&self) -> AlignmentConfig {
        let period = match self.align_period {
            0 => self.train.epochs.max(1),
            p => p,
        };
        AlignmentConfig {
            period,
            ..self.align.clone()
        }
    }

    /// Serialized form that `apply_text` reads back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// Key listing with defaults, for help output.
    pub fn help_text() -> String {
        let defaults = RunConfig::default();
        let mut out = String::from("Config keys (key = default: description):\n");
        for (key, what) in KEYS {
            let _ = writeln!(out, "  {key} = {}: {what}", defaults.get(key).expect("listed key"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("model.dim = 32\nalign.mode = no_ila+no_pg # ablation\n\neval.k=1,7\n")
            .unwrap();
        assert_eq!(cfg.model.dim, 32);
        assert!(cfg.align.mode.no_ila && cfg.align.mode.no_pg);
        assert_eq!(cfg.eval.ks, vec![1, 7]);
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_key_is_settable_and_listed_in_help() {
        let help = RunConfig::help_text();
        let cfg = RunConfig::default();
        for (key, _) in KEYS {
            let mut c = RunConfig::default();
            c.set(key, &cfg.get(key).unwrap()).unwrap();
            assert_eq!(c, cfg, "{key}");
            assert!(help.contains(&format!("{key} = ")), "{key}");
        }
    }

    #[test]
    fn precedence_is_file_then_env_then_flags() {
        let file = "seed = 1\ntrain.epochs = 3\n";
        let cfg = RunConfig::resolve(Some(file), None, &[]).unwrap();
        assert_eq!((cfg.seed, cfg.train.epochs), (1, 3));
        let cfg = RunConfig::resolve(Some(file), Some("9"), &[]).unwrap();
        assert_eq!(cfg.seed, 9);
        let cfg = RunConfig::resolve(Some(file), Some("9"), &["seed=5".into()]).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.train_config().seed, 5);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for bad in [
            "nope = 1",
            "model.dim = x",
            "align.mode = no_xyz",
            "model.gate = maybe",
            "justtext",
        ] {
            assert!(
                matches!(RunConfig::resolve(Some(bad), None, &[]), Err(Error::Config(_))),
                "{bad}"
            );
        }
        assert!(RunConfig::resolve(None, None, &["align.tau=0".into()]).is_err());
        assert!(RunConfig::resolve(None, None, &["train.alpha=-1".into()]).is_err());
        assert!(RunConfig::resolve(None, Some("abc"), &[]).is_err());
    }

    #[test]
    fn zero_period_follows_the_epoch_count() {
        let cfg = RunConfig::resolve(None, None, &["train.epochs=40".into()]).unwrap();
        assert_eq!(cfg.alignment().period, 40);
        let cfg = RunConfig::resolve(None, None, &["align.period=7".into()]).unwrap();
        assert_eq!(cfg.alignment().period, 7);
    }
}
