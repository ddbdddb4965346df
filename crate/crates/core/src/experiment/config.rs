//! Line-oriented `section.key = value` experiment configs.
//!
//! ```text
//! # comments start with '#'
//! train.method = lcgc
//! lcgc.lambda = 1.0
//! run.seeds = 0, 1, 2
//! ```
//!
//! Unknown and duplicate keys are rejected. Only `train.method` is required;
//! every other key has a default (see [`ExperimentConfig::default`]).

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::LongTailSpec;
use crate::debias::{BaselineColor, Method, TrainConfig};
use crate::error::{Error, Result};

pub const REQUIRED_KEYS: &[&str] = &["train.method"];

pub const KNOWN_KEYS: &[&str] = &[
    "dataset.classes",
    "dataset.dim",
    "dataset.n_max",
    "dataset.m_max",
    "dataset.gamma_l",
    "dataset.gamma_u",
    "dataset.reversed_unlabeled",
    "dataset.seed",
    "dataset.class_separation",
    "dataset.noise_sigma",
    "dataset.test_per_class",
    "augment.sigma_weak",
    "augment.sigma_strong",
    "augment.mask_fraction",
    "model.hidden",
    "train.backbone",
    "train.method",
    "train.batch_size",
    "train.mu",
    "train.tau",
    "train.consistency_weight",
    "train.learning_rate",
    "train.steps",
    "train.sharpen_temperature",
    "train.ema_decay",
    "lcgc.lambda",
    "lcgc.refine_pseudo_labels",
    "lcgc.refine_at_test",
    "lcgc.baseline",
    "lcgc.ig_steps",
    "lcgc.double_subtract",
    "run.name",
    "run.seeds",
    "run.output_dir",
];

/// Fully resolved experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: LongTailSpec,
    /// Hidden layer widths; input and output sizes come from the dataset.
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            dataset: LongTailSpec::default(),
            hidden: vec![64],
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn model_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.dataset.dim];
        dims.extend(&self.hidden);
        dims.push(self.dataset.classes);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config(None, Some("run.seeds"), "at least one seed is required"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config(None, Some("model.hidden"), "layer widths must be positive"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config(None, Some("run.name"), "must be a non-empty plain name"));
        }
        self.dataset
            .validate()
            .map_err(|e| Error::config(None, Some("dataset"), e.to_string()))?;
        self.train.validate()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(None, None, format!("cannot read {}: {e}", path.display()))
        })?;
        parse_config(&text)
    }
}

fn value<T: FromStr>(raw: &str, line: usize, key: &str, kind: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::config(Some(line), Some(key), format!("expected {kind}, got `{raw}`")))
}

fn boolean(raw: &str, line: usize, key: &str) -> Result<bool> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(Some(line), Some(key), format!("expected true or false, got `{raw}`"))),
    }
}

fn list<T: FromStr>(raw: &str, line: usize, key: &str, kind: &str) -> Result<Vec<T>> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|s| value(s.trim(), line, key, kind)).collect()
}

fn named<T: FromStr<Err = Error>>(raw: &str, line: usize, key: &str) -> Result<T> {
    raw.parse().map_err(|e| match e {
        Error::Config { message, .. } => Error::config(Some(line), Some(key), message),
        other => other,
    })
}

/// Parses config text into a validated [`ExperimentConfig`].
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut seen = HashSet::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, raw)) = content.split_once('=') else {
            return Err(Error::config(Some(line), None, format!("expected `key = value`, got `{content}`")));
        };
        let key = key.trim();
        let raw = raw.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::config(Some(line), Some(key), "unknown key"));
        }
        if !seen.insert(key.to_owned()) {
            return Err(Error::config(Some(line), Some(key), "duplicate key"));
        }
        let d = &mut cfg.dataset;
        let t = &mut cfg.train;
        match key {
            "dataset.classes" => d.classes = value(raw, line, key, "an integer")?,
            "dataset.dim" => d.dim = value(raw, line, key, "an integer")?,
            "dataset.n_max" => d.n_max = value(raw, line, key, "an integer")?,
            "dataset.m_max" => d.m_max = value(raw, line, key, "an integer")?,
            "dataset.gamma_l" => d.gamma_l = value(raw, line, key, "a number")?,
            "dataset.gamma_u" => d.gamma_u = value(raw, line, key, "a number")?,
            "dataset.reversed_unlabeled" => d.reversed_unlabeled = boolean(raw, line, key)?,
            "dataset.seed" => d.seed = value(raw, line, key, "an unsigned integer")?,
            "dataset.class_separation" => d.class_separation = value(raw, line, key, "a number")?,
            "dataset.noise_sigma" => d.noise_sigma = value(raw, line, key, "a number")?,
            "dataset.test_per_class" => d.test_per_class = value(raw, line, key, "an integer")?,
            "augment.sigma_weak" => t.augment.sigma_weak = value(raw, line, key, "a number")?,
            "augment.sigma_strong" => t.augment.sigma_strong = value(raw, line, key, "a number")?,
            "augment.mask_fraction" => t.augment.mask_fraction = value(raw, line, key, "a number")?,
            "model.hidden" => cfg.hidden = list(raw, line, key, "a comma-separated list of integers")?,
            "train.backbone" => t.backbone = named(raw, line, key)?,
            "train.method" => t.method = named::<Method>(raw, line, key)?,
            "train.batch_size" => t.batch_size = value(raw, line, key, "an integer")?,
            "train.mu" => t.mu = value(raw, line, key, "an integer")?,
            "train.tau" => t.tau = value(raw, line, key, "a number")?,
            "train.consistency_weight" => t.consistency_weight = value(raw, line, key, "a number")?,
            "train.learning_rate" => t.learning_rate = value(raw, line, key, "a number")?,
            "train.steps" => t.steps = value(raw, line, key, "an integer")?,
            "train.sharpen_temperature" => t.sharpen_temperature = value(raw, line, key, "a number")?,
            "train.ema_decay" => t.ema_decay = value(raw, line, key, "a number")?,
            "lcgc.lambda" => t.lcgc.lambda = value(raw, line, key, "a number")?,
            "lcgc.refine_pseudo_labels" => t.lcgc.refine_pseudo_labels = boolean(raw, line, key)?,
            "lcgc.refine_at_test" => t.lcgc.refine_at_test = boolean(raw, line, key)?,
            "lcgc.baseline" => t.lcgc.baseline = named::<BaselineColor>(raw, line, key)?,
            "lcgc.ig_steps" => t.lcgc.ig_steps = value(raw, line, key, "an integer")?,
            "lcgc.double_subtract" => t.lcgc.double_subtract = boolean(raw, line, key)?,
            "run.name" => cfg.name = raw.to_owned(),
            "run.seeds" => cfg.seeds = list(raw, line, key, "a comma-separated list of seeds")?,
            "run.output_dir" => cfg.output_dir = PathBuf::from(raw),
            _ => unreachable!("key list and match arms are out of sync: {key}"),
        }
    }
    for key in REQUIRED_KEYS {
        if !seen.contains(*key) {
            return Err(Error::config(None, Some(key), "missing required key"));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Renders a config back into the text format, every key explicit.
pub fn render_config(cfg: &ExperimentConfig) -> String {
    let d = &cfg.dataset;
    let t = &cfg.train;
    let join = |v: &[String]| v.join(", ");
    let lines = [
        format!("dataset.classes = {}", d.classes),
        format!("dataset.dim = {}", d.dim),
        format!("dataset.n_max = {}", d.n_max),
        format!("dataset.m_max = {}", d.m_max),
        format!("dataset.gamma_l = {:?}", d.gamma_l),
        format!("dataset.gamma_u = {:?}", d.gamma_u),
        format!("dataset.reversed_unlabeled = {}", d.reversed_unlabeled),
        format!("dataset.seed = {}", d.seed),
        format!("dataset.class_separation = {:?}", d.class_separation),
        format!("dataset.noise_sigma = {:?}", d.noise_sigma),
        format!("dataset.test_per_class = {}", d.test_per_class),
        format!("augment.sigma_weak = {:?}", t.augment.sigma_weak),
        format!("augment.sigma_strong = {:?}", t.augment.sigma_strong),
        format!("augment.mask_fraction = {:?}", t.augment.mask_fraction),
        format!("model.hidden = {}", join(&cfg.hidden.iter().map(ToString::to_string).collect::<Vec<_>>())),
        format!("train.backbone = {}", t.backbone),
        format!("train.method = {}", t.method),
        format!("train.batch_size = {}", t.batch_size),
        format!("train.mu = {}", t.mu),
        format!("train.tau = {:?}", t.tau),
        format!("train.consistency_weight = {:?}", t.consistency_weight),
        format!("train.learning_rate = {:?}", t.learning_rate),
        format!("train.steps = {}", t.steps),
        format!("train.sharpen_temperature = {:?}", t.sharpen_temperature),
        format!("train.ema_decay = {:?}", t.ema_decay),
        format!("lcgc.lambda = {:?}", t.lcgc.lambda),
        format!("lcgc.refine_pseudo_labels = {}", t.lcgc.refine_pseudo_labels),
        format!("lcgc.refine_at_test = {}", t.lcgc.refine_at_test),
        format!("lcgc.baseline = {}", t.lcgc.baseline),
        format!("lcgc.ig_steps = {}", t.lcgc.ig_steps),
        format!("lcgc.double_subtract = {}", t.lcgc.double_subtract),
        format!("run.name = {}", cfg.name),
        format!("run.seeds = {}", join(&cfg.seeds.iter().map(ToString::to_string).collect::<Vec<_>>())),
        format!("run.output_dir = {}", cfg.output_dir.display()),
    ];
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_is_defaulted() {
        let cfg = parse_config("train.method = lcgc\n").unwrap();
        let expected = ExperimentConfig::default();
        assert_eq!(cfg, expected);
        assert_eq!(cfg.train.lcgc.lambda, 1.0);
        assert_eq!(cfg.train.tau, 0.0);
        assert_eq!(cfg.train.lcgc.baseline, BaselineColor::Black);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config("train.method = lcgc\nlcgc.lamda = 0.5\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lcgc.lamda") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn missing_required_key() {
        let err = parse_config("lcgc.lambda = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("train.method"));
    }

    #[test]
    fn type_mismatch_and_duplicates() {
        let err = parse_config("train.method = lcgc\ntrain.steps = many\n").unwrap_err();
        assert!(err.to_string().contains("train.steps"));
        let err = parse_config("train.method = lcgc\ntrain.method = cdmad\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"));
        let err = parse_config("train.method = magic\n").unwrap_err();
        assert!(err.to_string().contains("line 1"));
        let err = parse_config("train.method = lcgc\nlcgc.baseline = purple\n").unwrap_err();
        assert!(err.to_string().contains("lcgc.baseline"));
        let err = parse_config("train.method = lcgc\nrun.seeds =\n").unwrap_err();
        assert!(err.to_string().contains("run.seeds"));
        assert!(parse_config("train.method lcgc\n").is_err());
    }

    #[test]
    fn lambda_zero_lcgc_is_accepted() {
        let cfg = parse_config("train.method = lcgc\nlcgc.lambda = 0  # degenerate\n").unwrap();
        assert_eq!(cfg.train.method, Method::Lcgc);
        assert_eq!(cfg.train.lcgc.lambda, 0.0);
        assert!(parse_config("train.method = lcgc\nlcgc.lambda = -1\n").is_err());
    }

    #[test]
    fn render_roundtrips() {
        let mut cfg = parse_config("train.method = cdmad\nmodel.hidden = 16, 8\nrun.seeds = 3, 9\n").unwrap();
        cfg.train.lcgc.baseline = BaselineColor::Gray;
        assert_eq!(parse_config(&render_config(&cfg)).unwrap(), cfg);
    }
}
