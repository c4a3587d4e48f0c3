//! Flat `key=value` run configuration: one file drives data selection,
//! feature/model arms, architecture overrides, and both training phases.
//!
//! Format: one `key=value` pair per line, `#` starts a full-line comment,
//! blank lines are ignored, keys use section prefixes (`pretrain.lr=0.0001`).
//! Unknown and duplicate keys are errors so typos fail loudly instead of
//! silently running defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::augment::AugmentArm;
use crate::data::WINDOW_LEN;
use crate::experiment::ArmSpec;
use crate::model::{EncoderConfig, ModelArm};
use crate::training::{FinetuneConfig, PretrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    BadLine { line: usize, msg: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config key '{key}': {msg}")]
    BadValue { key: String, msg: String },
    #[error("{0}")]
    Conflict(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("reading config {path}: {msg}")]
    Io { path: String, msg: String },
}

/// Where the windows come from: a directory of recordings or the synthetic
/// generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSpec {
    Dir(PathBuf),
    Synth { classes: usize, per_class: usize },
}

/// Everything a run needs. Single-arm commands (pretrain/finetune/evaluate)
/// use `augment` + `model_arm`; the experiment command runs `arms`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub augment: AugmentArm,
    pub model_arm: ModelArm,
    /// Arms for the experiment command, in report order.
    pub arms: Vec<ArmSpec>,
    /// Architecture template; `input_features` and `arm` are overridden per
    /// arm via [`ExperimentConfig::encoder_for`].
    pub model: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    /// Train/val/test fractions; must be positive and sum to 1.
    pub split: (f64, f64, f64),
    /// Master seed; propagated into both training phases.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSpec::Synth { classes: 4, per_class: 500 },
            augment: AugmentArm::Fm,
            model_arm: ModelArm::Ns,
            arms: ArmSpec::all().to_vec(),
            model: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            split: (0.7, 0.15, 0.15),
            seed: 0,
        }
    }
}

/// Split `text` into `key -> value`, rejecting malformed lines and duplicate
/// keys (duplicates report the offending line).
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| ConfigError::BadLine { line, msg: format!("expected key=value, got '{trimmed}'") })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(ConfigError::BadLine { line, msg: "empty key".into() });
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(ConfigError::BadLine { line, msg: format!("duplicate key '{key}'") });
        }
    }
    Ok(out)
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| ConfigError::BadValue { key: key.into(), msg: format!("'{value}': {e}") })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(ConfigError::BadValue {
            key: key.into(),
            msg: format!("'{other}': expected true or false"),
        }),
    }
}

fn parse_augment(key: &str, value: &str) -> Result<AugmentArm, ConfigError> {
    match value {
        "fm" => Ok(AugmentArm::Fm),
        "plain" => Ok(AugmentArm::Plain),
        other => Err(ConfigError::BadValue {
            key: key.into(),
            msg: format!("'{other}': expected fm or plain"),
        }),
    }
}

fn parse_model_arm(key: &str, value: &str) -> Result<ModelArm, ConfigError> {
    match value {
        "ns" => Ok(ModelArm::Ns),
        "vanilla" => Ok(ModelArm::Vanilla),
        other => Err(ConfigError::BadValue {
            key: key.into(),
            msg: format!("'{other}': expected ns or vanilla"),
        }),
    }
}

fn parse_arms(key: &str, value: &str) -> Result<Vec<ArmSpec>, ConfigError> {
    value
        .split(',')
        .map(|part| {
            ArmSpec::parse(part.trim())
                .map_err(|msg| ConfigError::BadValue { key: key.into(), msg })
        })
        .collect()
}

impl ExperimentConfig {
    /// Parse a config file's text. Every key is optional; defaults give the
    /// full four-arm synthetic experiment.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let kv = parse_kv(text)?;
        let mut cfg = ExperimentConfig::default();
        let mut dir: Option<PathBuf> = None;
        let mut classes: Option<usize> = None;
        let mut per_class: Option<usize> = None;
        for (key, value) in &kv {
            let k = key.as_str();
            let v = value.as_str();
            match k {
                "data.dir" => dir = Some(PathBuf::from(v)),
                "data.classes" => classes = Some(parse_num(k, v)?),
                "data.per_class" => per_class = Some(parse_num(k, v)?),
                "augment" => cfg.augment = parse_augment(k, v)?,
                "model.arm" => cfg.model_arm = parse_model_arm(k, v)?,
                "model.hidden" => cfg.model.hidden = parse_num(k, v)?,
                "model.layers" => cfg.model.layers = parse_num(k, v)?,
                "model.heads" => cfg.model.heads = parse_num(k, v)?,
                "model.ffn" => cfg.model.ffn = parse_num(k, v)?,
                "model.projector_hidden" => cfg.model.projector_hidden = parse_num(k, v)?,
                "model.gru_hidden" => cfg.model.gru_hidden = parse_num(k, v)?,
                "model.dropout" => cfg.model.dropout = parse_num(k, v)?,
                "pretrain.epochs" => cfg.pretrain.epochs = parse_num(k, v)?,
                "pretrain.lr" => cfg.pretrain.learning_rate = parse_num(k, v)?,
                "pretrain.batch_size" => cfg.pretrain.batch_size = parse_num(k, v)?,
                "pretrain.mask_ratio" => cfg.pretrain.mask_ratio = parse_num(k, v)?,
                "pretrain.mask_span" => cfg.pretrain.mask_span = parse_num(k, v)?,
                "pretrain.autoencode" => cfg.pretrain.autoencode = parse_bool(k, v)?,
                "finetune.epochs" => cfg.finetune.epochs = parse_num(k, v)?,
                "finetune.lr" => cfg.finetune.learning_rate = parse_num(k, v)?,
                "finetune.batch_size" => cfg.finetune.batch_size = parse_num(k, v)?,
                "finetune.freeze_encoder" => cfg.finetune.freeze_encoder = parse_bool(k, v)?,
                "split.train" => cfg.split.0 = parse_num(k, v)?,
                "split.val" => cfg.split.1 = parse_num(k, v)?,
                "split.test" => cfg.split.2 = parse_num(k, v)?,
                "experiment.arms" => cfg.arms = parse_arms(k, v)?,
                "seed" => cfg.seed = parse_num(k, v)?,
                other => return Err(ConfigError::UnknownKey(other.into())),
            }
        }
        match (dir, classes, per_class) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                return Err(ConfigError::Conflict(
                    "data.dir conflicts with data.classes/data.per_class".into(),
                ));
            }
            (Some(d), None, None) => cfg.data = DataSpec::Dir(d),
            (None, Some(c), Some(p)) => cfg.data = DataSpec::Synth { classes: c, per_class: p },
            (None, None, None) => {}
            _ => {
                return Err(ConfigError::Conflict(
                    "data.classes and data.per_class must be given together".into(),
                ));
            }
        }
        cfg.pretrain.seed = cfg.seed;
        cfg.finetune.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and parse a config file.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        Self::from_text(&text)
    }

    /// Override the master seed (CLI `--seed`), keeping phase seeds in sync.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self
    }

    /// The concrete architecture for one arm: the template with the arm's
    /// attention variant and feature count filled in.
    pub fn encoder_for(&self, spec: ArmSpec) -> EncoderConfig {
        EncoderConfig {
            input_features: spec.augment.channels(),
            arm: spec.model,
            ..self.model.clone()
        }
    }

    /// The arm single-run commands (pretrain/finetune/evaluate) operate on.
    pub fn single_arm(&self) -> ArmSpec {
        ArmSpec { model: self.model_arm, augment: self.augment }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let DataSpec::Synth { classes, per_class } = &self.data {
            if !(2..=10).contains(classes) {
                return Err(ConfigError::Invalid(format!(
                    "data.classes {classes} outside 2..=10"
                )));
            }
            if *per_class == 0 {
                return Err(ConfigError::Invalid("data.per_class must be positive".into()));
            }
        }
        if self.arms.is_empty() {
            return Err(ConfigError::Invalid("experiment.arms must not be empty".into()));
        }
        let (a, b, c) = self.split;
        if !(a > 0.0 && b > 0.0 && c > 0.0 && (a + b + c - 1.0).abs() < 1e-9) {
            return Err(ConfigError::Invalid(format!(
                "split fractions ({a}, {b}, {c}) must be positive and sum to 1"
            )));
        }
        if self.model.seq_len != WINDOW_LEN {
            return Err(ConfigError::Invalid(format!(
                "window length is fixed at {WINDOW_LEN}, got {}",
                self.model.seq_len
            )));
        }
        for spec in self
            .arms
            .iter()
            .copied()
            .chain(std::iter::once(self.single_arm()))
        {
            self.encoder_for(spec)
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("arm '{}': {e}", spec.name())))?;
        }
        self.pretrain.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.finetune.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

// ── tests ───────────────────────────────────────────────────────────────────
