//! One JSON file describing a whole run. Unknown keys are rejected and
//! every section is validated on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::BucketSpec;
use crate::error::{GurError, Result};
use crate::masking::MaskingConfig;
use crate::miner::{MineMode, MinerConfig};
use crate::model::ModelConfig;
use crate::objectives::LossWeights;
use crate::trainer::{TrainConfig, TrainSetup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinerSection {
    pub mode: MineMode,
    pub lcs_filter: bool,
    pub unutilized_only: bool,
    /// Emit document2title prompts alongside pairs.
    pub document2title: bool,
    pub document2title_max_chars: usize,
}

impl Default for MinerSection {
    fn default() -> Self {
        let m = MinerConfig::default();
        MinerSection {
            mode: m.mode,
            lcs_filter: m.lcs_filter,
            unutilized_only: m.unutilized_only,
            document2title: false,
            document2title_max_chars: 256,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalPaths {
    pub retrieval: Vec<PathBuf>,
    pub zeroshot: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds mining output order, shuffling, initialization and batches.
    pub seed: u64,
    pub miner: MinerSection,
    pub buckets: BucketSpec,
    pub masking: MaskingConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    /// `seed` and `lcs_filter` here are overwritten by the top-level values.
    pub train: TrainConfig,
    pub eval: EvalPaths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GurError::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| GurError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.buckets.validate()?;
        self.masking.hump.validate()?;
        self.masking.distribution()?;
        if !(self.masking.rate > 0.0 && self.masking.rate < 0.5) {
            return Err(GurError::Config(format!(
                "masking.rate must lie in (0, 0.5), got {}",
                self.masking.rate
            )));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.resolved_train().validate()?;
        if self.buckets.short_seq_len > self.model.max_seq {
            return Err(GurError::Config(format!(
                "buckets.short_seq_len {} exceeds model.max_seq {}",
                self.buckets.short_seq_len, self.model.max_seq
            )));
        }
        if self.miner.document2title && self.miner.document2title_max_chars == 0 {
            return Err(GurError::Config(
                "miner.document2title_max_chars must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn miner_config(&self) -> MinerConfig {
        MinerConfig {
            mode: self.miner.mode,
            lcs_filter: self.miner.lcs_filter,
            unutilized_only: self.miner.unutilized_only,
            bucket_spec: self.buckets.clone(),
        }
    }

    pub fn resolved_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            lcs_filter: self.miner.lcs_filter,
            ..self.train.clone()
        }
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            train: self.resolved_train(),
            loss: self.loss,
            masking: self.masking,
            buckets: self.buckets.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for bad in [
            r#"{"sede": 1}"#,
            r#"{"train": {"lr": 0.1}}"#,
            r#"{"model": {"dim": 8}}"#,
            r#"{"masking": {"hump": {"mean": 3}}}"#,
        ] {
            assert!(serde_json::from_str::<RunConfig>(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 5, "train": {"steps": 7}, "miner": {"lcs_filter": false}}"#).unwrap();
        let t = cfg.resolved_train();
        assert_eq!((t.steps, t.seed, t.lcs_filter), (7, 5, false));
        assert_eq!(t.learning_rate, 1e-4);
        assert!(!cfg.miner_config().lcs_filter);
    }

    #[test]
    fn invalid_sections_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.masking.rate = 0.7;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.buckets.short_seq_len = 500;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.train.learning_rate = -1.0;
        assert!(cfg.validate().is_err());
    }
}
