//! Plain-text `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! repeated keys are errors. [`ExperimentConfig::echo`] writes every key in a
//! fixed order, and parsing the echo gives back the same configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sparq_core::quantizer::UnsignedRange;
use sparq_core::regularizer::{LambdaMode, RegKind, RegSpec};
use sparq_core::trainer::{AwConfig, TrainConfig};
use sparq_core::{BlockAxis, SparsitySpec};
use thiserror::Error;

use crate::dataset::{DatasetKind, DatasetParams};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    Value { line: usize, key: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

/// Keys in echo order.
pub const KEYS: &[&str] = &[
    "name",
    "output",
    "dataset",
    "dataset.classes",
    "dataset.samples",
    "dataset.dim",
    "dataset.separation",
    "dataset.noise",
    "dataset.images",
    "dataset.labels",
    "seed",
    "epochs",
    "pretrain_epochs",
    "batch_size",
    "lr",
    "momentum",
    "cosine_lr",
    "hidden",
    "awconfig",
    "unsigned_range",
    "sparsity",
    "block_axis",
    "padding",
    "mask_policy",
    "warmup_epochs",
    "keep_dense_first",
    "keep_dense_last",
    "reg",
    "lambda_mode",
    "lambda",
    "ema_decay",
    "detach_compressed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    /// Run directory, relative to the output root unless absolute.
    pub output: Option<PathBuf>,
    pub dataset: DatasetKind,
    pub data: DatasetParams,
    pub seed: u64,
    /// Dense full-precision epochs run before compressed fine-tuning; zero
    /// trains the compressed network from scratch.
    pub pretrain_epochs: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            output: None,
            dataset: DatasetKind::Blobs,
            data: DatasetParams::default(),
            seed: 0,
            pretrain_epochs: 0,
            train: TrainConfig {
                reg: RegSpec {
                    lambda_mode: LambdaMode::Calibrated,
                    ..RegSpec::default()
                },
                ..TrainConfig::default()
            },
        }
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, got `{other}`")),
    }
}

fn parse_num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        let (mut axis, mut padding, mut nm): (BlockAxis, bool, Option<(usize, usize)>) =
            (BlockAxis::default(), false, None);
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    reason: format!("expected key = value, got `{trimmed}`"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { line, key: key.into() });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate { line, key: key.into() });
            }
            let bad = |reason: String| ConfigError::Value {
                line,
                key: key.into(),
                reason,
            };
            let t = &mut cfg.train;
            let r = &mut t.reg;
            match key {
                "name" => {
                    if value.is_empty() || value.contains(['/', '\\']) {
                        return Err(bad("name must be nonempty and contain no path separators".into()));
                    }
                    cfg.name = value.into();
                }
                "output" => cfg.output = parse_path(value),
                "dataset" => cfg.dataset = value.parse().map_err(bad)?,
                "dataset.classes" => cfg.data.classes = parse_num(value).map_err(bad)?,
                "dataset.samples" => cfg.data.samples = parse_num(value).map_err(bad)?,
                "dataset.dim" => cfg.data.dim = parse_num(value).map_err(bad)?,
                "dataset.separation" => cfg.data.separation = parse_num(value).map_err(bad)?,
                "dataset.noise" => cfg.data.noise = parse_num(value).map_err(bad)?,
                "dataset.images" => cfg.data.images = parse_path(value),
                "dataset.labels" => cfg.data.labels = parse_path(value),
                "seed" => cfg.seed = parse_num(value).map_err(bad)?,
                "epochs" => t.epochs = parse_num(value).map_err(bad)?,
                "pretrain_epochs" => cfg.pretrain_epochs = parse_num(value).map_err(bad)?,
                "batch_size" => t.batch_size = parse_num(value).map_err(bad)?,
                "lr" => t.lr = parse_num(value).map_err(bad)?,
                "momentum" => t.momentum = parse_num(value).map_err(bad)?,
                "cosine_lr" => t.cosine_lr = parse_bool(value).map_err(bad)?,
                "hidden" => {
                    t.hidden = if value.is_empty() || value == "none" {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|w| parse_num(w.trim()))
                            .collect::<Result<_, _>>()
                            .map_err(bad)?
                    }
                }
                "awconfig" => t.aw = value.parse().map_err(bad)?,
                "unsigned_range" => {
                    t.unsigned_range = match value {
                        "full" => UnsignedRange::Full,
                        "half" => UnsignedRange::Half,
                        other => return Err(bad(format!("expected full or half, got `{other}`"))),
                    }
                }
                "sparsity" => {
                    nm = if value == "none" || value == "dense" {
                        None
                    } else {
                        let spec: SparsitySpec = value.parse().map_err(bad)?;
                        Some((spec.n(), spec.m()))
                    }
                }
                "block_axis" => axis = value.parse().map_err(bad)?,
                "padding" => padding = parse_bool(value).map_err(bad)?,
                "mask_policy" => t.mask_policy = value.parse().map_err(bad)?,
                "warmup_epochs" => t.warmup_epochs = parse_num(value).map_err(bad)?,
                "keep_dense_first" => t.keep_dense_first = parse_bool(value).map_err(bad)?,
                "keep_dense_last" => t.keep_dense_last = parse_bool(value).map_err(bad)?,
                "reg" => r.kind = value.parse().map_err(bad)?,
                "lambda_mode" => r.lambda_mode = value.parse().map_err(bad)?,
                "lambda" => r.lambda = parse_num(value).map_err(bad)?,
                "ema_decay" => r.ema_decay = parse_num(value).map_err(bad)?,
                "detach_compressed" => r.detach_compressed = parse_bool(value).map_err(bad)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        cfg.train.sparsity = match nm {
            Some((n, m)) => Some(
                SparsitySpec::new(n, m)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?
                    .with_axis(axis)
                    .with_padding(padding),
            ),
            None => None,
        };
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.train.epochs == 0 && self.pretrain_epochs == 0 {
            return Err(ConfigError::Invalid("epochs must be >= 1".into()));
        }
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Resolved configuration with every key, in [`KEYS`] order.
    pub fn echo(&self) -> String {
        let t = &self.train;
        let r: &RegSpec = &t.reg;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let (sparsity, axis, padding) = match &t.sparsity {
            Some(s) => (s.to_string(), s.axis(), s.padding()),
            None => ("none".to_string(), BlockAxis::default(), false),
        };
        let hidden = if t.hidden.is_empty() {
            "none".to_string()
        } else {
            t.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",")
        };
        let values: [String; 32] = [
            self.name.clone(),
            path(&self.output),
            self.dataset.to_string(),
            self.data.classes.to_string(),
            self.data.samples.to_string(),
            self.data.dim.to_string(),
            format!("{:?}", self.data.separation),
            format!("{:?}", self.data.noise),
            path(&self.data.images),
            path(&self.data.labels),
            self.seed.to_string(),
            t.epochs.to_string(),
            self.pretrain_epochs.to_string(),
            t.batch_size.to_string(),
            format!("{:?}", t.lr),
            format!("{:?}", t.momentum),
            t.cosine_lr.to_string(),
            hidden,
            t.aw.to_string(),
            match t.unsigned_range {
                UnsignedRange::Full => "full".into(),
                UnsignedRange::Half => "half".into(),
            },
            sparsity,
            axis.to_string(),
            padding.to_string(),
            t.mask_policy.to_string(),
            t.warmup_epochs.to_string(),
            t.keep_dense_first.to_string(),
            t.keep_dense_last.to_string(),
            r.kind.to_string(),
            r.lambda_mode.to_string(),
            format!("{:?}", r.lambda),
            format!("{:?}", r.ema_decay),
            r.detach_compressed.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Same experiment with a different compression cell.
    pub fn with_cell(&self, sparsity: Option<SparsitySpec>, aw: AwConfig, reg: RegKind) -> Self {
        let mut c = self.clone();
        c.train.sparsity = sparsity;
        c.train.aw = aw;
        c.train.reg.kind = reg;
        c.name = cell_name(sparsity.as_ref(), aw, reg);
        c
    }
}

/// Directory-safe cell label such as `2-4_A4W4_cosine`.
pub fn cell_name(sparsity: Option<&SparsitySpec>, aw: AwConfig, reg: RegKind) -> String {
    let nm = sparsity.map_or("dense".to_string(), |s| format!("{}-{}", s.n(), s.m()));
    format!("{nm}_{}_{reg}", aw.to_string().replace('/', ""))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_echo() {
        let cfg = ExperimentConfig::default();
        let again = ExperimentConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn parses_a_full_cell() {
        let text = "\
# 2:4 at 4 bits with the cosine regularizer
name = slope
sparsity = 2:8
block_axis = flat-row-major
awconfig = A4/W4
reg = cosine
lambda_mode = fixed
lambda = 0.5
hidden = 32, 16
seed = 9
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        let s = cfg.train.sparsity.unwrap();
        assert_eq!((s.n(), s.m(), s.axis()), (2, 8, BlockAxis::FlatRowMajor));
        assert_eq!(cfg.train.aw, AwConfig::both(4));
        assert_eq!(cfg.train.reg.kind, RegKind::Cosine);
        assert_eq!(cfg.train.reg.lambda_mode, LambdaMode::Fixed);
        assert_eq!(cfg.train.hidden, vec![32, 16]);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(ExperimentConfig::parse(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert_eq!(
            ExperimentConfig::parse("seed = 1\nlearning_rate = 0.1\n"),
            Err(ConfigError::UnknownKey {
                line: 2,
                key: "learning_rate".into()
            })
        );
        assert!(matches!(
            ExperimentConfig::parse("seed = 1\nseed = 2\n"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("seed\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "lr = fast",
            "lr = -1",
            "awconfig = A4",
            "sparsity = 5:4",
            "padding = yes",
            "epochs = 0",
            "name = a/b",
        ] {
            assert!(ExperimentConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn cell_names() {
        assert_eq!(
            cell_name(Some(&SparsitySpec::two_four()), AwConfig::both(4), RegKind::Cosine),
            "2-4_A4W4_cosine"
        );
        assert_eq!(cell_name(None, AwConfig::FULL, RegKind::None), "dense_A32W32_none");
    }
}
