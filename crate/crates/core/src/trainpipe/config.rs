use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, QNormalization, TemperatureMode};
use crate::simkernel::{DirectionMode, MatchingThresholds, Scorer, ScorerConfig};
use crate::textaug::CaptionMode;

/// Which caption pairs count as positives in the contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positives {
    /// Every caption of the image's class, duplicates included.
    #[default]
    SameLabel,
    /// Only the image's own caption (one-hot targets).
    Diagonal,
}

impl FromStr for Positives {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same_label" => Ok(Positives::SameLabel),
            "diagonal" => Ok(Positives::Diagonal),
            other => Err(Error::config(format!(
                "unknown positives {other:?} (expected same_label or diagonal)"
            ))),
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scorer: Scorer,
    pub use_ic: bool,
    pub caption_mode: CaptionMode,
    pub lower_threshold: f64,
    pub upper_threshold: f64,
    pub directions: DirectionMode,
    pub m: f64,
    pub n: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    #[serde(with = "string_form")]
    pub temperature: TemperatureMode,
    pub q_normalization: QNormalization,
    pub positives: Positives,
    /// Record train/test accuracy after every epoch.
    pub eval_every_epoch: bool,
    /// Train samples scored for the per-epoch train accuracy.
    pub train_eval_samples: usize,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let th = MatchingThresholds::default();
        let w = LossWeights::default();
        Self {
            scorer: Scorer::Flexible,
            use_ic: true,
            caption_mode: CaptionMode::Standard,
            lower_threshold: th.lower,
            upper_threshold: th.upper,
            directions: DirectionMode::Symmetric,
            m: w.m,
            n: w.n,
            batch_size: 32,
            lr: 3e-4,
            weight_decay: 0.01,
            epochs: 10,
            seed: 0,
            temperature: TemperatureMode::default(),
            q_normalization: QNormalization::Literal,
            positives: Positives::SameLabel,
            eval_every_epoch: true,
            train_eval_samples: 256,
            encoder: EncoderConfig::default(),
        }
    }
}

mod string_form {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &TemperatureMode, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&t.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TemperatureMode, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl TrainConfig {
    pub fn thresholds(&self) -> Result<MatchingThresholds> {
        MatchingThresholds::new(self.lower_threshold, self.upper_threshold)
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.m, self.n)
    }

    pub fn scorer_config(&self) -> Result<ScorerConfig> {
        Ok(ScorerConfig {
            scorer: self.scorer,
            thresholds: self.thresholds()?,
            directions: self.directions,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds()?;
        self.weights()?;
        self.encoder.validate()?;
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.m == 0.0 && !self.use_ic {
            return Err(Error::config("m = 0 without the categorical branch leaves no objective"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short label used in tables: method name plus branch flags.
    pub fn method_label(&self) -> String {
        format!("{}{}", self.scorer.name(), if self.use_ic { "+ic" } else { "" })
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ic={} captions={} b={} lr={} epochs={} seed={}",
            self.scorer.name(),
            self.use_ic,
            self.caption_mode,
            self.batch_size,
            self.lr,
            self.epochs,
            self.seed
        )
    }
}
