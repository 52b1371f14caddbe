//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so an
//! empty file is a valid configuration. [`ExperimentConfig::to_text`] emits
//! every key in a fixed order and parses back to the same value.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{AttDomains, AttForm, AttMetric};
use crate::trainer::{DomainPair, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub height: usize,
    pub width: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub gens: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            height: 32,
            width: 32,
            train_samples: 200,
            eval_samples: 50,
            gens: 1,
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "height",
    "width",
    "train_samples",
    "eval_samples",
    "gens",
    "classes",
    "widths",
    "downsample",
    "sam_iterations",
    "iterations",
    "batch_size",
    "base_lr",
    "momentum",
    "weight_decay",
    "poly_power",
    "eval_interval",
    "att_form",
    "att_domains",
    "att_metric",
    "lambda",
    "use_conv",
    "use_skip",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl ExperimentConfig {
    /// Applies one override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => t.seed = parse_value(key, value)?,
            "height" => self.height = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "train_samples" => self.train_samples = parse_value(key, value)?,
            "eval_samples" => self.eval_samples = parse_value(key, value)?,
            "gens" => self.gens = parse_value(key, value)?,
            "classes" => t.net.classes = parse_value(key, value)?,
            "widths" => {
                t.net.widths = value
                    .split(',')
                    .map(|w| parse_value(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "downsample" => t.net.downsample = parse_value(key, value)?,
            "sam_iterations" => t.sam_iterations = parse_value(key, value)?,
            "iterations" => t.iterations = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "base_lr" => t.base_lr = parse_value(key, value)?,
            "momentum" => t.momentum = parse_value(key, value)?,
            "weight_decay" => t.weight_decay = parse_value(key, value)?,
            "poly_power" => t.poly_power = parse_value(key, value)?,
            "eval_interval" => t.eval_interval = parse_value(key, value)?,
            "att_form" => t.loss.form = parse_value::<AttForm>(key, value)?,
            "att_domains" => t.loss.domains = parse_value::<AttDomains>(key, value)?,
            "att_metric" => t.loss.metric = parse_value::<AttMetric>(key, value)?,
            "lambda" => t.loss.lambda = parse_value(key, value)?,
            "use_conv" => t.use_conv = parse_value(key, value)?,
            "use_skip" => t.use_skip = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let t = &self.train;
        match key {
            "seed" => t.seed.to_string(),
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "train_samples" => self.train_samples.to_string(),
            "eval_samples" => self.eval_samples.to_string(),
            "gens" => self.gens.to_string(),
            "classes" => t.net.classes.to_string(),
            "widths" => t
                .net
                .widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "downsample" => t.net.downsample.to_string(),
            "sam_iterations" => t.sam_iterations.to_string(),
            "iterations" => t.iterations.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "base_lr" => format!("{:?}", t.base_lr),
            "momentum" => format!("{:?}", t.momentum),
            "weight_decay" => format!("{:?}", t.weight_decay),
            "poly_power" => format!("{:?}", t.poly_power),
            "eval_interval" => t.eval_interval.to_string(),
            "att_form" => t.loss.form.to_string(),
            "att_domains" => t.loss.domains.to_string(),
            "att_metric" => t.loss.metric.to_string(),
            "lambda" => format!("{:?}", t.loss.lambda),
            "use_conv" => t.use_conv.to_string(),
            "use_skip" => t.use_skip.to_string(),
            _ => unreachable!("key list and accessors agree"),
        }
    }

    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.gens == 0 {
            return Err(Error::Config("gens must be >= 1".into()));
        }
        if self.train_samples == 0 || self.eval_samples == 0 {
            return Err(Error::Config("sample counts must be > 0".into()));
        }
        let d = self.train.net.downsample;
        if !self.height.is_multiple_of(d) || !self.width.is_multiple_of(d) {
            return Err(Error::Config(format!(
                "image size {}x{} not divisible by downsample {d}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn domain_pair(&self) -> Result<DomainPair> {
        DomainPair::generate(
            self.train.seed,
            self.train_samples,
            self.eval_samples,
            self.height,
            self.width,
        )
    }
}
