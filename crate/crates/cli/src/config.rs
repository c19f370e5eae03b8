//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! out-of-range values are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use terntrain_core::data::{self, Dataset, Normalization};
use terntrain_core::optim::{OptimizerConfig, OptimizerKind};
use terntrain_core::trainer::{LrSchedule, ThresholdConfig, TrainConfig};
use terntrain_core::ternarizer::DEFAULT_INIT_FRACTION;

pub const SEED_ENV: &str = "TERNTRAIN_SEED";

const KEYS: &[&str] = &[
    "arch",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "train_csv",
    "test_csv",
    "norm_mean",
    "norm_std",
    "batch_size",
    "epochs",
    "seed",
    "optimizer",
    "lr",
    "momentum",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "threshold_lr",
    "lr_schedule",
    "init_frac",
    "grad_correctness",
    "output_dir",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: String,
    pub train: Option<DataSource>,
    pub test: Option<DataSource>,
    pub norm: Normalization,
    pub epochs: usize,
    pub train_cfg: TrainConfig,
    pub output_dir: PathBuf,
    /// The effective settings as text, for run records.
    pub entries: BTreeMap<String, String>,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| err(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(err(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

fn in_range(key: &str, v: f64, ok: bool, range: &str) -> Result<f64, ConfigError> {
    if ok && v.is_finite() {
        Ok(v)
    } else {
        Err(err(format!("`{key}` must be {range}, got {v}")))
    }
}

impl RunConfig {
    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(err(format!("line {}: unknown key `{k}`", i + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(err(format!("line {}: duplicate key `{k}`", i + 1)));
            }
        }
        Self::from_entries(entries, base)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| err(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Applies `key=value` overrides (from flags or the environment) and revalidates.
    pub fn with_override(self, key: &str, value: &str, base: &Path) -> Result<Self, ConfigError> {
        if !KEYS.contains(&key) {
            return Err(err(format!("unknown key `{key}`")));
        }
        let mut entries = self.entries;
        entries.insert(key.to_string(), value.to_string());
        Self::from_entries(entries, base)
    }

    /// Applies the seed override from the environment, if set.
    pub fn with_env_seed(self, base: &Path) -> Result<Self, ConfigError> {
        match std::env::var(SEED_ENV) {
            Ok(seed) => self.with_override("seed", seed.trim(), base),
            Err(_) => Ok(self),
        }
    }

    fn from_entries(entries: BTreeMap<String, String>, base: &Path) -> Result<Self, ConfigError> {
        let get = |k: &str| entries.get(k).map(String::as_str);
        let path = |k: &str| get(k).map(|p| base.join(p));
        let arch = get("arch").ok_or_else(|| err("missing required key `arch`"))?.to_string();
        let source = |split: &str| -> Result<Option<DataSource>, ConfigError> {
            let (img, lbl, csv) = (path(&format!("{split}_images")), path(&format!("{split}_labels")), path(&format!("{split}_csv")));
            match (img, lbl, csv) {
                (None, None, None) => Ok(None),
                (Some(images), Some(labels), None) => Ok(Some(DataSource::Idx { images, labels })),
                (None, None, Some(csv)) => Ok(Some(DataSource::Csv(csv))),
                _ => Err(err(format!("{split} data needs either {split}_images and {split}_labels, or {split}_csv"))),
            }
        };
        let num = |k: &str, default: f64| get(k).map_or(Ok(default), |v| parse_num::<f64>(k, v));

        let norm_mean = num("norm_mean", 0.0)?;
        let norm_std = num("norm_std", 1.0)?;
        in_range("norm_std", norm_std, norm_std > 0.0, "> 0")?;
        let batch_size: usize = get("batch_size").map_or(Ok(100), |v| parse_num("batch_size", v))?;
        if batch_size == 0 {
            return Err(err("`batch_size` must be > 0"));
        }
        let epochs: usize = get("epochs").map_or(Ok(10), |v| parse_num("epochs", v))?;
        let seed: u64 = get("seed").map_or(Ok(0), |v| parse_num("seed", v))?;
        let kind = OptimizerKind::parse(get("optimizer").unwrap_or("sgd-momentum")).map_err(|e| err(e.to_string()))?;
        let lr = num("lr", 0.1)?;
        in_range("lr", lr, lr > 0.0, "> 0")?;
        let momentum = num("momentum", if kind == OptimizerKind::SgdMomentum { 0.9 } else { 0.0 })?;
        in_range("momentum", momentum, (0.0..1.0).contains(&momentum), "in [0, 1)")?;
        let beta1 = num("beta1", 0.9)?;
        let beta2 = num("beta2", 0.999)?;
        for (k, b) in [("beta1", beta1), ("beta2", beta2)] {
            in_range(k, b, (0.0..1.0).contains(&b), "in [0, 1)")?;
        }
        let eps = num("eps", 1e-8)?;
        in_range("eps", eps, eps > 0.0, "> 0")?;
        let weight_decay = num("weight_decay", 0.0)?;
        in_range("weight_decay", weight_decay, weight_decay >= 0.0, "≥ 0")?;
        let threshold_lr = get("threshold_lr").map(|v| parse_num::<f64>("threshold_lr", v)).transpose()?;
        if let Some(t) = threshold_lr {
            in_range("threshold_lr", t, t >= 0.0, "≥ 0")?;
        }
        let schedule = LrSchedule::parse(get("lr_schedule").unwrap_or("")).map_err(|e| err(format!("`lr_schedule`: {e}")))?;
        let init_fraction = num("init_frac", DEFAULT_INIT_FRACTION)?;
        in_range("init_frac", init_fraction, (0.0..=1.0).contains(&init_fraction), "in [0, 1]")?;
        let grad_correctness = get("grad_correctness").map_or(Ok(true), |v| parse_bool("grad_correctness", v))?;

        let optimizer = OptimizerConfig { kind, lr, momentum, betas: (beta1, beta2), eps, weight_decay };
        let train_cfg = TrainConfig {
            optimizer,
            threshold: ThresholdConfig { lr: threshold_lr },
            batch_size,
            seed,
            schedule,
            grad_correctness,
            init_fraction,
        };
        train_cfg.validate().map_err(|e| err(e.to_string()))?;
        Ok(Self {
            arch,
            train: source("train")?,
            test: source("test")?,
            norm: Normalization { mean: norm_mean, std: norm_std },
            epochs,
            train_cfg,
            output_dir: path("output_dir").unwrap_or_else(|| base.join("runs")),
            entries,
        })
    }

    pub fn seed(&self) -> u64 {
        self.train_cfg.seed
    }
}

pub fn load_source(src: &DataSource, norm: Normalization) -> terntrain_core::Result<Dataset> {
    match src {
        DataSource::Idx { images, labels } => data::load_idx(images, labels, norm),
        DataSource::Csv(path) => data::load_csv(path),
    }
}
