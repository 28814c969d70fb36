//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::DType;

use crate::adversarial::ClassifierLayout;
use crate::autoencoder::{AutoencoderConfig, DivergenceForm};
use crate::error::{io_err, CaclError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub w_recon: f64,
    pub w_commit: f64,
    pub w_codebook: f64,
    pub w_map: f64,
    pub w_cls: f64,
    pub beta: f64,
    pub margin: f64,
    pub divergence: DivergenceForm,
    pub lr_generator: f64,
    pub lr_classifier: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub eval_interval: u64,
    pub num_shared: usize,
    pub num_class: usize,
    pub dim: usize,
    pub hidden: usize,
    pub residual_blocks: usize,
    pub ema_decay: f64,
    pub pool_capacity: usize,
    pub dead_code_threshold: u64,
    pub dead_code_interval: u64,
    /// Weight of a class code's uses on negative patches against its uses on
    /// positive patches when deciding whether the code is dead.
    pub class_leak_penalty: u64,
    /// Quantile of negative cells' distance to the shared codes above which a
    /// positive cell counts as novel and may train the class codes.
    pub novelty_quantile: f64,
    pub classifier: ClassifierLayout,
    pub flips: bool,
    pub double_precision: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            w_recon: 1.0,
            w_commit: 1.0,
            w_codebook: 0.1,
            w_map: 0.1,
            w_cls: 1.0,
            beta: 0.25,
            margin: 1.0,
            divergence: DivergenceForm::Hinge,
            lr_generator: 2e-4,
            lr_classifier: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 8,
            steps: 2000,
            seed: 0,
            checkpoint_interval: 500,
            eval_interval: 50,
            num_shared: 32,
            num_class: 32,
            dim: 64,
            hidden: 32,
            residual_blocks: 2,
            ema_decay: 0.99,
            pool_capacity: 50,
            dead_code_threshold: 0,
            dead_code_interval: 50,
            class_leak_penalty: 4,
            novelty_quantile: 0.99,
            classifier: ClassifierLayout::Compact,
            flips: true,
            double_precision: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| CaclError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CaclError::Config(format!("`{key}`: expected true/false, got `{v}`"))),
    }
}

/// Documented configuration keys, in file order.
pub const KEYS: &[&str] = &[
    "w_recon",
    "w_commit",
    "w_codebook",
    "w_map",
    "w_cls",
    "beta",
    "margin",
    "divergence",
    "lr_generator",
    "lr_classifier",
    "adam_beta1",
    "adam_beta2",
    "batch_size",
    "steps",
    "seed",
    "checkpoint_interval",
    "eval_interval",
    "num_shared",
    "num_class",
    "dim",
    "hidden",
    "residual_blocks",
    "ema_decay",
    "pool_capacity",
    "dead_code_threshold",
    "dead_code_interval",
    "class_leak_penalty",
    "novelty_quantile",
    "classifier",
    "flips",
    "double_precision",
];

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "w_recon" => self.w_recon = parse_num(key, v)?,
            "w_commit" => self.w_commit = parse_num(key, v)?,
            "w_codebook" => self.w_codebook = parse_num(key, v)?,
            "w_map" => self.w_map = parse_num(key, v)?,
            "w_cls" => self.w_cls = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "margin" => self.margin = parse_num(key, v)?,
            "divergence" => {
                self.divergence = match v {
                    "hinge" => DivergenceForm::Hinge,
                    "signed" => DivergenceForm::Signed,
                    _ => return Err(CaclError::Config(format!("`divergence`: expected hinge|signed, got `{v}`"))),
                }
            }
            "lr_generator" => self.lr_generator = parse_num(key, v)?,
            "lr_classifier" => self.lr_classifier = parse_num(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse_num(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_num(key, v)?,
            "eval_interval" => self.eval_interval = parse_num(key, v)?,
            "num_shared" => self.num_shared = parse_num(key, v)?,
            "num_class" => self.num_class = parse_num(key, v)?,
            "dim" => self.dim = parse_num(key, v)?,
            "hidden" => self.hidden = parse_num(key, v)?,
            "residual_blocks" => self.residual_blocks = parse_num(key, v)?,
            "ema_decay" => self.ema_decay = parse_num(key, v)?,
            "pool_capacity" => self.pool_capacity = parse_num(key, v)?,
            "dead_code_threshold" => self.dead_code_threshold = parse_num(key, v)?,
            "dead_code_interval" => self.dead_code_interval = parse_num(key, v)?,
            "class_leak_penalty" => self.class_leak_penalty = parse_num(key, v)?,
            "novelty_quantile" => self.novelty_quantile = parse_num(key, v)?,
            "classifier" => {
                self.classifier = match v {
                    "compact" => ClassifierLayout::Compact,
                    "resnet18" => ClassifierLayout::Resnet18,
                    _ => return Err(CaclError::Config(format!("`classifier`: expected compact|resnet18, got `{v}`"))),
                }
            }
            "flips" => self.flips = parse_bool(key, v)?,
            "double_precision" => self.double_precision = parse_bool(key, v)?,
            other => return Err(CaclError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "w_recon" => self.w_recon.to_string(),
            "w_commit" => self.w_commit.to_string(),
            "w_codebook" => self.w_codebook.to_string(),
            "w_map" => self.w_map.to_string(),
            "w_cls" => self.w_cls.to_string(),
            "beta" => self.beta.to_string(),
            "margin" => self.margin.to_string(),
            "divergence" => match self.divergence {
                DivergenceForm::Hinge => "hinge".into(),
                DivergenceForm::Signed => "signed".into(),
            },
            "lr_generator" => self.lr_generator.to_string(),
            "lr_classifier" => self.lr_classifier.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "seed" => self.seed.to_string(),
            "checkpoint_interval" => self.checkpoint_interval.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "num_shared" => self.num_shared.to_string(),
            "num_class" => self.num_class.to_string(),
            "dim" => self.dim.to_string(),
            "hidden" => self.hidden.to_string(),
            "residual_blocks" => self.residual_blocks.to_string(),
            "ema_decay" => self.ema_decay.to_string(),
            "pool_capacity" => self.pool_capacity.to_string(),
            "dead_code_threshold" => self.dead_code_threshold.to_string(),
            "dead_code_interval" => self.dead_code_interval.to_string(),
            "class_leak_penalty" => self.class_leak_penalty.to_string(),
            "novelty_quantile" => self.novelty_quantile.to_string(),
            "classifier" => match self.classifier {
                ClassifierLayout::Compact => "compact".into(),
                ClassifierLayout::Resnet18 => "resnet18".into(),
            },
            "flips" => self.flips.to_string(),
            "double_precision" => self.double_precision.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CaclError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("documented key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.w_recon, self.w_commit, self.w_codebook, self.w_map, self.w_cls];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(CaclError::Config("loss weights must be finite and nonnegative".into()));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(CaclError::Config("batch_size and steps must be at least 1".into()));
        }
        if self.beta < 0.0 || self.margin < 0.0 {
            return Err(CaclError::Config("beta and margin must be nonnegative".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(CaclError::Config("ema_decay must lie in (0, 1)".into()));
        }
        if self.num_shared == 0 || self.num_class == 0 || self.dim == 0 || self.hidden < 2 || self.pool_capacity == 0 {
            return Err(CaclError::Config("codebook sizes, widths and pool capacity must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.novelty_quantile) {
            return Err(CaclError::Config("novelty_quantile must lie in [0, 1]".into()));
        }
        if !(self.lr_generator > 0.0 && self.lr_classifier > 0.0) {
            return Err(CaclError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        if self.double_precision {
            DType::F64
        } else {
            DType::F32
        }
    }

    pub fn autoencoder(&self) -> AutoencoderConfig {
        AutoencoderConfig { hidden: self.hidden, dim: self.dim, residual_blocks: self.residual_blocks }
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        KEYS.iter().map(|k| (k.to_string(), self.get(k).expect("documented key"))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.seed = 99;
        cfg.divergence = DivergenceForm::Signed;
        cfg.classifier = ClassifierLayout::Resnet18;
        cfg.lr_generator = 1.5e-3;
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = TrainConfig::parse("# comment\nsteps = 10  # trailing\n\nw_map=0\n").unwrap();
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.w_map, 0.0);
        assert!(TrainConfig::parse("nonsense = 1").is_err());
        assert!(TrainConfig::parse("steps 10").is_err());
        assert!(TrainConfig::parse("w_recon = -1").is_err());
        assert!(TrainConfig::parse("batch_size = 0").is_err());
    }
}
