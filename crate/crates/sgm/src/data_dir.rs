//! A generated data directory: schema, cohort, normalization and splits.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use sgm_core::data::{NormStats, OrganSchema, ParticipantRecord, Splits};

use crate::error::Result;
use crate::formats::{read_cohort, read_norm_stats, read_schema, read_splits};

pub const SCHEMA_FILE: &str = "schema.json";
pub const COHORT_FILE: &str = "cohort.jsonl";
pub const NORM_FILE: &str = "norm_stats.json";
pub const SPLITS_FILE: &str = "splits.json";

/// Loaded data directory. `records` are already normalized.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub path: PathBuf,
    pub schema: OrganSchema,
    pub norm: NormStats,
    pub records: Vec<ParticipantRecord>,
    pub splits: Splits,
}

impl DataDir {
    pub fn load(path: &Path) -> Result<Self> {
        let schema = read_schema(&path.join(SCHEMA_FILE))?;
        let (raw, _) = read_cohort(&path.join(COHORT_FILE), &schema)?;
        let norm = read_norm_stats(&path.join(NORM_FILE), &schema)?;
        let splits = read_splits(&path.join(SPLITS_FILE), &raw)?;
        Ok(Self {
            path: path.to_path_buf(),
            records: norm.normalize_all(&raw),
            schema,
            norm,
            splits,
        })
    }

    pub fn pretrain(&self) -> Vec<ParticipantRecord> {
        Splits::select(&self.records, &self.splits.pretrain)
    }

    pub fn train(&self) -> Vec<ParticipantRecord> {
        Splits::select(&self.records, &self.splits.train)
    }

    pub fn val(&self) -> Vec<ParticipantRecord> {
        Splits::select(&self.records, &self.splits.val)
    }

    pub fn test(&self) -> Vec<ParticipantRecord> {
        Splits::select(&self.records, &self.splits.test)
    }

    /// Every task name that labels at least one record.
    pub fn tasks(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.records.iter().flat_map(|r| r.labels.keys()).collect();
        set.into_iter().cloned().collect()
    }
}
