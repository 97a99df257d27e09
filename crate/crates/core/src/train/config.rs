//! Training configuration and the flat `key = value` settings format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Encoder, ModelConfig};

/// Which cross-entropy terms enter `L_p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub y: bool,
    pub y_o: bool,
    pub y_c: bool,
}

impl LossTerms {
    pub const Y: LossTerms = LossTerms {
        y: true,
        y_o: false,
        y_c: false,
    };
    pub const ALL: LossTerms = LossTerms {
        y: true,
        y_o: true,
        y_c: true,
    };
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms {
            y: true,
            y_o: true,
            y_c: false,
        }
    }
}

impl fmt::Display for LossTerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.y, "y"), (self.y_o, "yo"), (self.y_c, "yc")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for LossTerms {
    type Err = Error;

    /// Comma-separated subset of `y`, `yo`, `yc`.
    fn from_str(s: &str) -> Result<Self> {
        let mut t = LossTerms {
            y: false,
            y_o: false,
            y_c: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "y" => t.y = true,
                "yo" | "y_o" => t.y_o = true,
                "yc" | "y_c" => t.y_c = true,
                other => return Err(Error::Config(format!("unknown loss term {other:?}"))),
            }
        }
        if !(t.y || t.y_o || t.y_c) {
            return Err(Error::Config("at least one loss term is required".into()));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub tau: f64,
    pub gamma: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub folds: usize,
    pub loss_terms: LossTerms,
    /// Global gradient-norm clip; `None` disables it.
    pub clip: Option<f64>,
    /// Fraction of the training folds held out for checkpoint selection.
    pub val_fraction: f64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Folds trained concurrently. Does not affect results.
    #[serde(skip)]
    pub parallel_folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            tau: 10.0,
            gamma: 1e-5,
            lr: 0.001,
            batch: 128,
            epochs: 30,
            seed: 0,
            folds: 5,
            loss_terms: LossTerms::default(),
            clip: Some(5.0),
            val_fraction: 0.1,
            patience: None,
            parallel_folds: 1,
        }
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{name} must be a finite non-negative number, got {v}"
        )))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        non_negative("eta", self.eta)?;
        non_negative("tau", self.tau)?;
        non_negative("gamma", self.gamma)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch and epochs must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if let Some(c) = self.clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("clip must be positive, got {c}")));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.patience == Some(0) || self.parallel_folds == 0 {
            return Err(Error::Config("patience and parallel_folds must be at least 1".into()));
        }
        Ok(())
    }

    /// Apply one setting. Returns `false` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "eta" => self.eta = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "folds" => self.folds = num(key, value)?,
            "loss_terms" => self.loss_terms = value.parse()?,
            "clip" => self.clip = optional(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "patience" => self.patience = optional(key, value)?,
            "parallel_folds" => self.parallel_folds = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "off" | "none" => Ok(None),
        v => num(key, v).map(Some),
    }
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

/// Apply one model setting. Returns `false` for keys the model does not own.
pub fn set_model_key(cfg: &mut ModelConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "encoder" => cfg.encoder = value.trim().parse::<Encoder>()?,
        "cmm" => cfg.use_cmm = parse_bool(key, value)?,
        "pam" => cfg.use_pam = parse_bool(key, value)?,
        "hidden" => cfg.hidden = num(key, value)?,
        "embed_dim" => cfg.embed_dim = num(key, value)?,
        "heads" => cfg.heads = num(key, value)?,
        "dropout" => cfg.dropout = num(key, value)?,
        "threshold" => cfg.mask_threshold = num(key, value)?,
        "init_scale" => cfg.init_scale = num(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Parse `key = value` lines. `#` starts a comment; dashes in keys are read
/// as underscores. Repeated keys are an error.
pub fn parse_settings(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let key = k.trim().replace('-', "_");
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|(seen, _)| *seen == key) {
            return Err(Error::Config(format!("line {}: duplicate key {key}", i + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Apply settings in order; unknown keys are an error.
pub fn apply_settings(pairs: &[(String, String)], model: &mut ModelConfig, train: &mut TrainConfig) -> Result<()> {
    for (k, v) in pairs {
        if !set_model_key(model, k, v)? && !train.set(k, v)? {
            return Err(Error::Config(format!("unknown setting {k}")));
        }
    }
    Ok(())
}

/// Every setting that influences results, in a fixed order.
pub fn settings_echo(model: &ModelConfig, train: &TrainConfig) -> Vec<(String, String)> {
    let opt = |v: Option<String>| v.unwrap_or_else(|| "off".into());
    [
        ("encoder", model.encoder.to_string()),
        ("cmm", model.use_cmm.to_string()),
        ("pam", model.use_pam.to_string()),
        ("hidden", model.hidden.to_string()),
        ("embed_dim", model.embed_dim.to_string()),
        ("heads", model.heads.to_string()),
        ("dropout", model.dropout.to_string()),
        ("threshold", model.mask_threshold.to_string()),
        ("init_scale", model.init_scale.to_string()),
        ("eta", train.eta.to_string()),
        ("tau", train.tau.to_string()),
        ("gamma", train.gamma.to_string()),
        ("lr", train.lr.to_string()),
        ("batch", train.batch.to_string()),
        ("epochs", train.epochs.to_string()),
        ("seed", train.seed.to_string()),
        ("folds", train.folds.to_string()),
        ("loss_terms", train.loss_terms.to_string()),
        ("clip", opt(train.clip.map(|c| c.to_string()))),
        ("val_fraction", train.val_fraction.to_string()),
        ("patience", opt(train.patience.map(|p| p.to_string()))),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}
