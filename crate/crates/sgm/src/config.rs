//! Run configuration files.

use serde::{Deserialize, Serialize};
use sgm_core::data::CohortGenConfig;
use sgm_core::eval::{DropoutEvalConfig, FinetuneConfig, ProbeConfig};
use sgm_core::model::ModelConfig;
use sgm_core::train::DistillConfig;

use crate::error::{Error, Result};

pub const DEFAULT_SPLIT: [f64; 4] = [0.5, 0.25, 0.05, 0.2];

/// `gen-data` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub cohort: CohortGenConfig,
    /// Pretrain, train, val and test fractions.
    pub split: [f64; 4],
    /// Task whose label stratifies the split.
    pub split_task: String,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            cohort: CohortGenConfig::default(),
            split: DEFAULT_SPLIT,
            split_task: "global".into(),
        }
    }
}

/// `pretrain` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub train: DistillConfig,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: DistillConfig::default(),
            checkpoint_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub config: FinetuneConfig,
    pub seeds: Vec<u64>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            config: FinetuneConfig::default(),
            seeds: (0..5).collect(),
        }
    }
}

/// `eval` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Protocol labels plus the report names `pairwise`, `importance` and
    /// `trajectory`.
    pub protocols: Vec<String>,
    /// Tasks to evaluate; empty means every label present in the data.
    pub tasks: Vec<String>,
    pub probe_seeds: Vec<u64>,
    pub dropout_seeds: Vec<u64>,
    pub probe: ProbeConfig,
    /// Fraction of the probe-training split actually used (first records of a
    /// seeded shuffle).
    pub train_fraction: f64,
    /// Number of test participants for saliency trajectories.
    pub trajectory_sample: usize,
    pub finetune: Option<FinetuneSection>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocols: vec![
                "standard".into(),
                "full".into(),
                "drop1".into(),
                "drop2".into(),
                "drop3".into(),
            ],
            tasks: Vec::new(),
            probe_seeds: (0..10).collect(),
            dropout_seeds: (0..5).collect(),
            probe: ProbeConfig::default(),
            train_fraction: 1.0,
            trajectory_sample: 256,
            finetune: None,
        }
    }
}

impl EvalConfig {
    pub fn dropout(&self) -> DropoutEvalConfig {
        DropoutEvalConfig {
            probe_seeds: self.probe_seeds.clone(),
            dropout_seeds: self.dropout_seeds.clone(),
            probe: self.probe,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Usage("train_fraction: must lie in (0, 1]".into()));
        }
        self.dropout().validate()?;
        if let Some(ft) = &self.finetune {
            ft.config.validate()?;
        }
        Ok(())
    }
}
