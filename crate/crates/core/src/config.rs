//! Experiment configuration: `key = value` lines, `#` comments.
//!
//! Every key has a fixed type; `sampler`, `batch_size`, `epochs` and `mode`
//! are required. [`ExperimentConfig::to_text`] writes every key, so a run
//! directory's snapshot reproduces the run on its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::encoders::EncoderDims;
use crate::engine::{AdamWConfig, ExecutionMode, SamplerKind, StepOptions, TrainConfig};
use crate::error::{LabError, Result};
use crate::mixup::DEFAULT_ALPHA;
use crate::numerics::SeedContext;
use crate::sampling::SourceId;
use crate::synthdata::{CorpusSpec, CorruptionRates};

pub const REQUIRED_KEYS: [&str; 4] = ["sampler", "batch_size", "epochs", "mode"];

/// Name of the built-in corpus; any other `corpus` value is a directory
/// written by `gen-corpus`.
pub const PRESET_CORPUS: &str = "biased-three-source";

#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSource {
    Preset,
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub corpus_samples: [usize; 3],
    pub corpus_dz: usize,
    pub style_strength: f64,
    pub style_token_rate: f64,
    pub eval_size: usize,
    pub corpus_seed: u64,
    pub sampler: SamplerKind,
    pub sequential_order: Vec<SourceId>,
    pub batch_size: usize,
    pub epochs: usize,
    pub mode: ExecutionMode,
    pub mixup: bool,
    pub mixup_alpha: f64,
    pub token_drop: f64,
    pub dropout: f64,
    pub corruption: bool,
    pub image_hidden: usize,
    pub text_hidden: usize,
    pub d_emb: usize,
    pub optimizer: AdamWConfig,
    pub kmeans_k: usize,
    pub kmeans_iters: usize,
    pub probe_batches: usize,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

struct Entry {
    value: String,
    /// 1-based line in the file, or `None` for a command-line override.
    line: Option<usize>,
}

fn where_(e: &Entry, key: &str) -> String {
    match e.line {
        Some(l) => format!("line {l}, key `{key}`"),
        None => format!("override --{key}"),
    }
}

fn field_error(e: &Entry, key: &str, message: String) -> LabError {
    LabError::Parse {
        line: e.line.unwrap_or(0),
        message: format!("{}: {message}", where_(e, key)),
    }
}

struct Fields(BTreeMap<String, Entry>);

impl Fields {
    fn get<T: FromStr>(&self, key: &str, default: Option<T>) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => default.ok_or_else(|| LabError::MissingKey(key.to_string())),
            Some(e) => e
                .value
                .parse::<T>()
                .map_err(|err| field_error(e, key, format!("cannot parse `{}`: {err}", e.value))),
        }
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.0.get(key) {
            None => Ok(default),
            Some(e) => match e.value.as_str() {
                "on" | "true" | "yes" => Ok(true),
                "off" | "false" | "no" => Ok(false),
                other => Err(field_error(e, key, format!("expected on|off, got `{other}`"))),
            },
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(e) if e.value.trim().is_empty() => Ok(Some(Vec::new())),
            Some(e) => e
                .value
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<T>()
                        .map_err(|err| field_error(e, key, format!("cannot parse list item `{t}`: {err}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    fn check(&self, key: &str, ok: bool, message: impl FnOnce() -> String) -> Result<()> {
        match (ok, self.0.get(key)) {
            (true, _) => Ok(()),
            (false, Some(e)) => Err(field_error(e, key, message())),
            (false, None) => Err(LabError::InvalidArgument(format!("`{key}`: {}", message()))),
        }
    }
}

pub const KNOWN_KEYS: [&str; 34] = [
    "corpus",
    "corpus_samples",
    "corpus_dz",
    "style_strength",
    "style_token_rate",
    "eval_size",
    "corpus_seed",
    "sampler",
    "sequential_order",
    "batch_size",
    "epochs",
    "mode",
    "mixup",
    "mixup_alpha",
    "token_drop",
    "dropout",
    "corruption",
    "image_hidden",
    "text_hidden",
    "d_emb",
    "lr",
    "min_lr",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "kmeans_k",
    "kmeans_iters",
    "probe_batches",
    "seed",
    "output",
    // accepted so a snapshot can record them; ignored on load
    "version",
    "vocab",
    "d_patch",
];

impl ExperimentConfig {
    /// Parses a config file, then applies `overrides` (`key`, `value`) in order.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        Self::parse_with(text, overrides, true)
    }

    /// Like [`parse`](Self::parse) but fills absent required keys with
    /// placeholders, for commands that only need the corpus keys.
    pub fn parse_corpus_only(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        Self::parse_with(text, overrides, false)
    }

    fn parse_with(text: &str, overrides: &[(String, String)], strict: bool) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| LabError::Parse {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(LabError::Parse {
                    line,
                    message: format!("unknown key `{key}`"),
                });
            }
            if let Some(prev) = fields.get(&key) {
                let prev: &Entry = prev;
                return Err(LabError::Parse {
                    line,
                    message: format!("key `{key}` already set on line {}", prev.line.unwrap_or(0)),
                });
            }
            fields.insert(
                key,
                Entry {
                    value: value.trim().to_string(),
                    line: Some(line),
                },
            );
        }
        for (key, value) in overrides {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(LabError::InvalidArgument(format!("unknown override --{key}")));
            }
            fields.insert(
                key.clone(),
                Entry {
                    value: value.clone(),
                    line: None,
                },
            );
        }
        if !strict {
            for (key, value) in [("sampler", "random"), ("batch_size", "2"), ("epochs", "1"), ("mode", "full")] {
                fields.entry(key.to_string()).or_insert(Entry {
                    value: value.to_string(),
                    line: None,
                });
            }
        }
        Self::from_fields(Fields(fields))
    }

    fn from_fields(f: Fields) -> Result<Self> {
        for key in REQUIRED_KEYS {
            if !f.0.contains_key(key) {
                return Err(LabError::MissingKey(key.to_string()));
            }
        }
        let defaults = AdamWConfig::default();
        let corpus = match f.get::<String>("corpus", Some(PRESET_CORPUS.to_string()))? {
            name if name == PRESET_CORPUS => CorpusSource::Preset,
            path => CorpusSource::Directory(PathBuf::from(path)),
        };
        let samples = f.list::<usize>("corpus_samples")?.unwrap_or_else(|| vec![3000, 2000, 1000]);
        f.check("corpus_samples", samples.len() == 3 && samples.iter().all(|&n| n > 0), || {
            format!("expected three positive counts, got {samples:?}")
        })?;
        let cfg = Self {
            corpus,
            corpus_samples: [samples[0], samples[1], samples[2]],
            corpus_dz: f.get("corpus_dz", Some(16))?,
            style_strength: f.get("style_strength", Some(1.5))?,
            style_token_rate: f.get("style_token_rate", Some(0.0))?,
            eval_size: f.get("eval_size", Some(1000))?,
            corpus_seed: f.get("corpus_seed", Some(0))?,
            sampler: f.get("sampler", None)?,
            sequential_order: f.list("sequential_order")?.unwrap_or_default(),
            batch_size: f.get("batch_size", None)?,
            epochs: f.get("epochs", None)?,
            mode: f.get("mode", None)?,
            mixup: f.flag("mixup", false)?,
            mixup_alpha: f.get("mixup_alpha", Some(DEFAULT_ALPHA))?,
            token_drop: f.get("token_drop", Some(0.0))?,
            dropout: f.get("dropout", Some(0.1))?,
            corruption: f.flag("corruption", true)?,
            image_hidden: f.get("image_hidden", Some(64))?,
            text_hidden: f.get("text_hidden", Some(64))?,
            d_emb: f.get("d_emb", Some(32))?,
            optimizer: AdamWConfig {
                lr: f.get("lr", Some(defaults.lr))?,
                min_lr: f.get("min_lr", Some(defaults.min_lr))?,
                weight_decay: f.get("weight_decay", Some(defaults.weight_decay))?,
                beta1: f.get("beta1", Some(defaults.beta1))?,
                beta2: f.get("beta2", Some(defaults.beta2))?,
                eps: f.get("adam_eps", Some(defaults.eps))?,
            },
            kmeans_k: f.get("kmeans_k", Some(100))?,
            kmeans_iters: f.get("kmeans_iters", Some(50))?,
            probe_batches: f.get("probe_batches", Some(10))?,
            seed: f.get("seed", Some(0))?,
            output: f.0.get("output").map(|e| PathBuf::from(&e.value)),
        };
        f.check("batch_size", cfg.batch_size >= 2, || "batch size must be at least 2".into())?;
        f.check("epochs", cfg.epochs > 0, || "epochs must be positive".into())?;
        f.check("mode", cfg.mode.validate(cfg.batch_size).is_ok(), || {
            cfg.mode.validate(cfg.batch_size).unwrap_err().to_string()
        })?;
        f.check("token_drop", (0.0..1.0).contains(&cfg.token_drop), || "must lie in [0, 1)".into())?;
        f.check("dropout", (0.0..1.0).contains(&cfg.dropout), || "must lie in [0, 1)".into())?;
        f.check("mixup_alpha", cfg.mixup_alpha > 0.0, || "must be positive".into())?;
        f.check("style_token_rate", (0.0..1.0).contains(&cfg.style_token_rate), || "must lie in [0, 1)".into())?;
        f.check("lr", cfg.optimizer.lr >= 0.0 && cfg.optimizer.min_lr <= cfg.optimizer.lr, || {
            "need 0 <= min_lr <= lr".into()
        })?;
        f.check("image_hidden", cfg.image_hidden > 0 && cfg.text_hidden > 0 && cfg.d_emb > 0, || {
            "model widths must be positive".into()
        })?;
        Ok(cfg)
    }

    /// The preset corpus spec for this config.
    pub fn corpus_spec(&self) -> CorpusSpec {
        let mut spec =
            CorpusSpec::biased_three_source(self.corpus_samples, self.corpus_dz, &self.corpus_context().derive("spec"));
        spec.eval_size = self.eval_size;
        for src in &mut spec.sources {
            src.style_strength = self.style_strength;
            src.style_token_rate = self.style_token_rate;
        }
        spec
    }

    pub fn corpus_context(&self) -> SeedContext {
        SeedContext::new(self.corpus_seed, "corpus")
    }

    pub fn train_context(&self) -> SeedContext {
        SeedContext::new(self.seed, "train")
    }

    pub fn dims(&self, d_patch: usize, vocab: usize) -> EncoderDims {
        EncoderDims {
            d_patch,
            image_hidden: self.image_hidden,
            text_hidden: self.text_hidden,
            d_emb: self.d_emb,
            vocab,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            sampler: self.sampler,
            sequential_order: self.sequential_order.clone(),
            batch_size: self.batch_size,
            epochs: self.epochs,
            step_options: StepOptions {
                token_drop: self.token_drop,
                mixup_alpha: self.mixup.then_some(self.mixup_alpha),
            },
            corruption: self.corruption.then(CorruptionRates::default),
            mode: self.mode,
            optimizer: self.optimizer,
            kmeans_k: self.kmeans_k,
            kmeans_iters: self.kmeans_iters,
        }
    }

    /// Every key, one per line; floats use round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv(
            "corpus",
            match &self.corpus {
                CorpusSource::Preset => PRESET_CORPUS.to_string(),
                CorpusSource::Directory(p) => p.display().to_string(),
            },
        );
        let join = |v: &[String]| v.join(",");
        kv("corpus_samples", join(&self.corpus_samples.map(|n| n.to_string())));
        kv("corpus_dz", self.corpus_dz.to_string());
        kv("style_strength", format!("{:?}", self.style_strength));
        kv("style_token_rate", format!("{:?}", self.style_token_rate));
        kv("eval_size", self.eval_size.to_string());
        kv("corpus_seed", self.corpus_seed.to_string());
        kv("sampler", self.sampler.to_string());
        kv(
            "sequential_order",
            join(&self.sequential_order.iter().map(|s| s.to_string()).collect::<Vec<_>>()),
        );
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("mode", self.mode.to_string());
        kv("mixup", if self.mixup { "on" } else { "off" }.to_string());
        kv("mixup_alpha", format!("{:?}", self.mixup_alpha));
        kv("token_drop", format!("{:?}", self.token_drop));
        kv("dropout", format!("{:?}", self.dropout));
        kv("corruption", if self.corruption { "on" } else { "off" }.to_string());
        kv("image_hidden", self.image_hidden.to_string());
        kv("text_hidden", self.text_hidden.to_string());
        kv("d_emb", self.d_emb.to_string());
        kv("lr", format!("{:?}", self.optimizer.lr));
        kv("min_lr", format!("{:?}", self.optimizer.min_lr));
        kv("weight_decay", format!("{:?}", self.optimizer.weight_decay));
        kv("beta1", format!("{:?}", self.optimizer.beta1));
        kv("beta2", format!("{:?}", self.optimizer.beta2));
        kv("adam_eps", format!("{:?}", self.optimizer.eps));
        kv("kmeans_k", self.kmeans_k.to_string());
        kv("kmeans_iters", self.kmeans_iters.to_string());
        kv("probe_batches", self.probe_batches.to_string());
        kv("seed", self.seed.to_string());
        if let Some(o) = &self.output {
            kv("output", o.display().to_string());
        }
        s
    }
}
