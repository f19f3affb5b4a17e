use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::division::ThresholdController;
use crate::error::{PcsrError, Result};
use crate::losses::LossWeights;
use crate::numerics::AdamConfig;

/// Which subsets take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Clean, then refinable, then ambiguous pairs.
    Full,
    /// Divides every epoch but only ever trains on the clean set.
    CleanOnly,
    /// No division: every training pair is treated as clean.
    NoDivision,
    /// Full schedule with the refinable set left out.
    WithoutRefinable,
    /// Full schedule with the ambiguous set left out.
    WithoutAmbiguous,
}

impl std::str::FromStr for Variant {
    type Err = PcsrError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| PcsrError::config(format!("unknown variant `{s}`")))
    }
}

/// Every training knob, readable from a flat TOML document.
///
/// Epochs are counted after warmup: epoch 1 is the first divided epoch and
/// `total_epochs` the last. Stage 2 starts at `stage2_start` and stage 3 at
/// `stage3_start`; when unset they default to the same fractions of the run as
/// 20 and 41 are of 50 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub num_classes: usize,
    pub hidden: usize,
    pub d_emb: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_start: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage3_start: Option<usize>,
    pub lr: f64,
    pub lambda_t: f64,
    pub lambda_ce: f64,
    pub lambda_gce: f64,
    pub lambda_en: f64,
    pub margin_m: f64,
    pub margin_alpha: f64,
    pub gce_gamma: f64,
    pub tau0: f64,
    pub k: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub beta: f64,
    pub gmm_max_iters: usize,
    pub gmm_tol: f64,
    pub clean_threshold: f64,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let c = ThresholdController::default();
        TrainConfig {
            num_classes: 32,
            hidden: 128,
            d_emb: 64,
            batch_size: 128,
            warmup_epochs: 5,
            total_epochs: 50,
            stage2_start: None,
            stage3_start: None,
            lr: 1e-3,
            lambda_t: w.lambda_t,
            lambda_ce: w.lambda_ce,
            lambda_gce: w.lambda_gce,
            lambda_en: w.lambda_en,
            margin_m: w.margin_m,
            margin_alpha: w.margin_alpha,
            gce_gamma: w.gce_gamma,
            tau0: c.tau,
            k: c.k,
            lambda_min: c.lambda_min,
            lambda_max: c.lambda_max,
            beta: c.beta,
            gmm_max_iters: 100,
            gmm_tol: 1e-8,
            clean_threshold: 0.5,
            checkpoint_every: 10,
            seed: 42,
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_t: self.lambda_t,
            lambda_ce: self.lambda_ce,
            lambda_gce: self.lambda_gce,
            lambda_en: self.lambda_en,
            margin_m: self.margin_m,
            margin_alpha: self.margin_alpha,
            gce_gamma: self.gce_gamma,
        }
    }

    pub fn controller(&self) -> ThresholdController {
        ThresholdController {
            tau: self.tau0,
            lambda_min: self.lambda_min,
            lambda_max: self.lambda_max,
            k: self.k,
            beta: self.beta,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    /// First epochs of stages 2 and 3.
    pub fn stage_starts(&self) -> (usize, usize) {
        let scaled = |default: usize| self.total_epochs * (default - 1) / 50 + 1;
        (
            self.stage2_start.unwrap_or_else(|| scaled(20)),
            self.stage3_start.unwrap_or_else(|| scaled(41)),
        )
    }

    pub fn stage_of(&self, epoch: usize) -> u8 {
        let (s2, s3) = self.stage_starts();
        if epoch >= s3 {
            3
        } else if epoch >= s2 {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(PcsrError::config("total_epochs must be positive"));
        }
        if self.total_epochs < self.warmup_epochs {
            return Err(PcsrError::config(format!(
                "total_epochs ({}) is smaller than warmup_epochs ({})",
                self.total_epochs, self.warmup_epochs
            )));
        }
        let (s2, s3) = self.stage_starts();
        if !(1 <= s2 && s2 <= s3 && s3 <= self.total_epochs + 1) {
            return Err(PcsrError::config(format!(
                "stage starts {s2}/{s3} must satisfy 1 ≤ stage2 ≤ stage3 ≤ total_epochs + 1"
            )));
        }
        if self.batch_size < 2 {
            return Err(PcsrError::config("batch_size must be at least 2"));
        }
        if self.num_classes < 2 || self.hidden == 0 || self.d_emb == 0 {
            return Err(PcsrError::config("num_classes ≥ 2 and positive hidden/d_emb required"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(PcsrError::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.clean_threshold) {
            return Err(PcsrError::config("clean_threshold must lie in [0, 1]"));
        }
        if self.gmm_max_iters == 0 {
            return Err(PcsrError::config("gmm_max_iters must be positive"));
        }
        self.weights().validate()?;
        self.controller().validate()
    }

    /// Parses a TOML document over the defaults. Unknown keys are rejected by name.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| PcsrError::config(format!("config: {}", e.message())))?;
        Self::from_table(table)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: TrainConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| PcsrError::config(format!("config: {}", e.message())))?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides in order. Values are read as TOML; anything
    /// that does not parse as a TOML value is taken as a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = toml::Table::try_from(self)
            .map_err(|e| PcsrError::config(format!("config: {e}")))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| PcsrError::config(format!("override `{item}` is not key=value")))?;
            let key = key.trim();
            let raw = raw.trim();
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
            table.insert(key.to_owned(), value);
        }
        Self::from_table(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.stage_starts(), (20, 41));
        assert_eq!((cfg.stage_of(19), cfg.stage_of(20), cfg.stage_of(40), cfg.stage_of(41)), (1, 2, 2, 3));
        assert_eq!(cfg.weights(), LossWeights::default());
    }

    #[test]
    fn short_runs_keep_all_stages() {
        let cfg = TrainConfig {
            total_epochs: 3,
            warmup_epochs: 2,
            ..TrainConfig::default()
        };
        cfg.validate().unwrap();
        assert_eq!((cfg.stage_of(1), cfg.stage_of(2), cfg.stage_of(3)), (1, 2, 3));
    }

    #[test]
    fn total_below_warmup_rejected() {
        let cfg = TrainConfig {
            total_epochs: 3,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(PcsrError::Config(_))));
    }

    #[test]
    fn toml_and_overrides() {
        let cfg = TrainConfig::from_toml_str("total_epochs = 7\nlr = 0.01\nvariant = \"clean_only\"\n").unwrap();
        assert_eq!(cfg.total_epochs, 7);
        assert_eq!(cfg.variant, Variant::CleanOnly);
        let cfg = cfg
            .with_overrides(&["batch_size=16", "variant=no_division", "stage2_start = 3"])
            .unwrap();
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.variant, Variant::NoDivision);
        assert_eq!(cfg.stage2_start, Some(3));
        assert_eq!(cfg.lr, 0.01);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = TrainConfig::from_toml_str("learning_rat = 3").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        let err = TrainConfig::default().with_overrides(&["bogus=1"]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        assert!(TrainConfig::default().with_overrides(&["novalue"]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = TrainConfig {
            stage3_start: Some(45),
            ..TrainConfig::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
    }
}
