//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fghash::dataset::{load_manifest, synth_generate};
use fghash::{Dataset, LossWeights, ModelConfig, SynthConfig, TrainConfig};

/// Any problem with the run configuration or with flag values. Maps to
/// exit code 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

const REQUIRED: &[&str] = &["dataset", "output_dir"];

const KNOWN: &[&str] = &[
    "dataset",
    "output_dir",
    "parts",
    "bits",
    "image_side",
    "backbone_widths",
    "refine_channels",
    "refine_kernel",
    "outer_iters",
    "epochs_per_iter",
    "batch_size",
    "learning_rate",
    "lr_decay_at",
    "samples_per_epoch",
    "warmup_fraction",
    "weight_decay",
    "momentum",
    "exchange",
    "seed",
    "lambda",
    "gamma",
    "margin",
    "synth_classes",
    "synth_per_class_db",
    "synth_per_class_query",
    "synth_parts",
    "synth_patch_size",
    "synth_jitter",
    "synth_noise",
    "synth_contrast",
    "synth_seed",
    "top_n",
    "top_k",
];

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth,
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DataSource,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `None` means the size-dependent default.
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub margin: f64,
    pub synth: SynthConfig,
    pub top_n: usize,
    pub top_k: usize,
}

/// Raw entries of a config file in line order.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut pairs = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return cfg_err(format!("line {}: expected `key = value`, found `{line}`", i + 1));
        };
        let (key, value) = (key.trim(), value.trim());
        if !KNOWN.contains(&key) {
            return cfg_err(format!("line {}: unknown key `{key}`", i + 1));
        }
        if pairs.insert(key.to_string(), value.to_string()).is_some() {
            return cfg_err(format!("line {}: duplicate key `{key}`", i + 1));
        }
    }
    Ok(pairs)
}

fn value<T: FromStr>(pairs: &BTreeMap<String, String>, key: &str, default: T) -> Result<T, ConfigError> {
    match pairs.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| ConfigError(format!("bad value `{v}` for key `{key}`"))),
    }
}

fn list<T: FromStr>(pairs: &BTreeMap<String, String>, key: &str, default: Vec<T>) -> Result<Vec<T>, ConfigError> {
    match pairs.get(key) {
        None => Ok(default),
        Some(v) if v.is_empty() => Ok(Vec::new()),
        Some(v) => v
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| ConfigError(format!("bad list `{v}` for key `{key}`"))),
    }
}

fn boolean(pairs: &BTreeMap<String, String>, key: &str, default: bool) -> Result<bool, ConfigError> {
    match pairs.get(key).map(String::as_str) {
        None => Ok(default),
        Some("true" | "yes" | "1") => Ok(true),
        Some("false" | "no" | "0") => Ok(false),
        Some(v) => cfg_err(format!("bad boolean `{v}` for key `{key}`")),
    }
}

fn weight(pairs: &BTreeMap<String, String>, key: &str) -> Result<Option<f64>, ConfigError> {
    match pairs.get(key).map(String::as_str) {
        None | Some("auto") => Ok(None),
        Some(_) => value(pairs, key, 0.0).map(Some),
    }
}

impl RunConfig {
    /// Parses `text`; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let pairs = parse_pairs(text)?;
        for key in REQUIRED {
            if !pairs.contains_key(*key) {
                return cfg_err(format!("missing required key `{key}`"));
            }
        }
        let dataset = match pairs["dataset"].as_str() {
            "synth" => DataSource::Synth,
            p => DataSource::Manifest(base.join(p)),
        };
        let dm = ModelConfig::default();
        let model = ModelConfig {
            parts: value(&pairs, "parts", dm.parts)?,
            bits: value(&pairs, "bits", dm.bits)?,
            image_side: value(&pairs, "image_side", dm.image_side)?,
            in_channels: 3,
            backbone_widths: list(&pairs, "backbone_widths", dm.backbone_widths)?,
            refine_channels: value(&pairs, "refine_channels", dm.refine_channels)?,
            refine_kernel: value(&pairs, "refine_kernel", dm.refine_kernel)?,
        };
        let dt = TrainConfig::default();
        let train = TrainConfig {
            outer_iters: value(&pairs, "outer_iters", dt.outer_iters)?,
            epochs_per_iter: value(&pairs, "epochs_per_iter", dt.epochs_per_iter)?,
            batch_size: value(&pairs, "batch_size", dt.batch_size)?,
            learning_rate: value(&pairs, "learning_rate", dt.learning_rate)?,
            lr_decay_at: list(&pairs, "lr_decay_at", dt.lr_decay_at)?,
            samples_per_epoch: value(&pairs, "samples_per_epoch", dt.samples_per_epoch)?,
            warmup_fraction: value(&pairs, "warmup_fraction", dt.warmup_fraction)?,
            weight_decay: value(&pairs, "weight_decay", dt.weight_decay)?,
            momentum: value(&pairs, "momentum", dt.momentum)?,
            exchange: boolean(&pairs, "exchange", dt.exchange)?,
            seed: value(&pairs, "seed", dt.seed)?,
        };
        let ds = SynthConfig::default();
        let synth = SynthConfig {
            num_classes: value(&pairs, "synth_classes", ds.num_classes)?,
            per_class_db: value(&pairs, "synth_per_class_db", ds.per_class_db)?,
            per_class_query: value(&pairs, "synth_per_class_query", ds.per_class_query)?,
            image_side: model.image_side,
            parts: value(&pairs, "synth_parts", ds.parts)?,
            patch_size: value(&pairs, "synth_patch_size", ds.patch_size)?,
            position_jitter: value(&pairs, "synth_jitter", ds.position_jitter)?,
            pixel_noise: value(&pairs, "synth_noise", ds.pixel_noise)?,
            class_contrast: value(&pairs, "synth_contrast", ds.class_contrast)?,
            seed: value(&pairs, "synth_seed", ds.seed)?,
        };
        let cfg = Self {
            dataset,
            output_dir: base.join(&pairs["output_dir"]),
            model,
            train,
            lambda: weight(&pairs, "lambda")?,
            gamma: weight(&pairs, "gamma")?,
            margin: value(&pairs, "margin", fghash::losses::DEFAULT_MARGIN)?,
            synth,
            top_n: value(&pairs, "top_n", 100)?,
            top_k: value(&pairs, "top_k", 10)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: fghash::Error| ConfigError(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        if matches!(self.dataset, DataSource::Synth) {
            self.synth.validate().map_err(wrap)?;
        }
        if self.top_k > self.top_n {
            return cfg_err(format!("top_k = {} exceeds top_n = {}", self.top_k, self.top_n));
        }
        Ok(())
    }

    /// Loss weights for a database of `db_size` items.
    pub fn weights(&self, db_size: usize) -> LossWeights {
        let d = LossWeights::defaults(self.model.bits, db_size);
        LossWeights {
            lambda: self.lambda.unwrap_or(d.lambda),
            gamma: self.gamma.unwrap_or(d.gamma),
            margin: self.margin,
        }
    }

    pub fn load_dataset(&self) -> fghash::Result<Dataset> {
        let ds = match &self.dataset {
            DataSource::Synth => synth_generate(&self.synth)?,
            DataSource::Manifest(p) => load_manifest(p, self.model.image_side)?,
        };
        ds.validate_splits()?;
        Ok(ds)
    }
}
