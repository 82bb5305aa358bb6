//! Run configuration: defaults, `key = value` files and overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::PeMode;
use crate::error::{DatrError, Result};
use crate::model::{ModelConfig, Structure, Variant};
use crate::uda::LossWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub variant: Variant,
    pub neighborhood: usize,
    pub structure: Structure,
    pub pe_mode: PeMode,
    pub wrap_horizontal: bool,
    pub lr: f64,
    pub epochs_source: usize,
    pub epochs_adapt: usize,
    pub batch_size: usize,
    pub lambda_ss: f64,
    pub lambda_f: f64,
    pub threshold: f64,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::M,
            neighborhood: 11,
            structure: Structure::default(),
            pe_mode: PeMode::Rpe,
            wrap_horizontal: false,
            lr: 5e-5,
            epochs_source: 5,
            epochs_adapt: 10,
            batch_size: 4,
            lambda_ss: 1.0,
            lambda_f: 0.1,
            threshold: 0.0,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DatrError::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(DatrError::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    /// Set one field by name; `-` and `_` are interchangeable in keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "variant" => self.variant = value.parse()?,
            "neighborhood" => self.neighborhood = parse(&key, value)?,
            "structure" => self.structure = value.parse()?,
            "pe" | "pe_mode" => self.pe_mode = value.parse()?,
            "wrap_horizontal" => self.wrap_horizontal = parse_bool(&key, value)?,
            "lr" => self.lr = parse(&key, value)?,
            "epochs_source" => self.epochs_source = parse(&key, value)?,
            "epochs_adapt" => self.epochs_adapt = parse(&key, value)?,
            "batch_size" => self.batch_size = parse(&key, value)?,
            "lambda_ss" => self.lambda_ss = parse(&key, value)?,
            "lambda_f" => self.lambda_f = parse(&key, value)?,
            "threshold" => self.threshold = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "data" | "data_dir" => self.data_dir = PathBuf::from(value),
            "out" | "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(DatrError::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Apply a `key = value` document; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DatrError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v.trim().trim_matches('"'))
                .map_err(|e| DatrError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| DatrError::io(path, e))?;
        self.apply_text(&text)
            .map_err(|e| DatrError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.neighborhood == 0 || self.neighborhood % 2 == 0 {
            return Err(DatrError::Config(format!("neighborhood {} must be odd", self.neighborhood)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(DatrError::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(DatrError::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(DatrError::Config(format!("threshold {} must be in [0, 1]", self.threshold)));
        }
        for (k, v) in [("lambda_ss", self.lambda_ss), ("lambda_f", self.lambda_f)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DatrError::Config(format!("{k} {v} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_ss: self.lambda_ss,
            lambda_f: self.lambda_f,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_source + self.epochs_adapt
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        let mut cfg = ModelConfig::preset(self.variant, num_classes).with_structure(self.structure);
        cfg.window = self.neighborhood;
        cfg.pe_mode = self.pe_mode;
        cfg.wrap_horizontal = self.wrap_horizontal;
        cfg
    }
}
