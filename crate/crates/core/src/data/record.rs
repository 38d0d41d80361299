use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{DataError, OrganSchema, OrganSet};

/// One participant: optional per-organ features (schema order) and binary
/// task labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantRecord {
    pub id: String,
    pub organs: Vec<Option<Vec<f64>>>,
    pub labels: BTreeMap<String, u8>,
}

/// An organ that was dropped on ingest because its vector was incomplete.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordWarning {
    pub id: String,
    pub organ: String,
    pub reason: String,
}

impl ParticipantRecord {
    pub fn new(id: impl Into<String>, organs: Vec<Option<Vec<f64>>>) -> Self {
        Self {
            id: id.into(),
            organs,
            labels: BTreeMap::new(),
        }
    }

    pub fn availability(&self) -> OrganSet {
        OrganSet::from_indices(
            self.organs
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_some())
                .map(|(o, _)| o),
        )
    }

    pub fn is_available(&self, o: usize) -> bool {
        self.organs.get(o).is_some_and(Option::is_some)
    }

    pub fn n_available(&self) -> usize {
        self.organs.iter().filter(|v| v.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.organs.iter().all(Option::is_some)
    }

    pub fn label(&self, task: &str) -> Option<u8> {
        self.labels.get(task).copied()
    }

    /// Marks organs whose vectors have the wrong width or non-finite entries
    /// as absent. Returns one warning per organ dropped.
    pub fn sanitize(&mut self, schema: &OrganSchema) -> Vec<RecordWarning> {
        let mut warnings = Vec::new();
        self.organs.resize(schema.len(), None);
        for (o, slot) in self.organs.iter_mut().enumerate() {
            let spec = schema.organ(o);
            let reason = match slot {
                Some(v) if v.len() != spec.feature_dim => {
                    Some(format!("{} of {} values present", v.len(), spec.feature_dim))
                }
                Some(v) if v.iter().any(|x| !x.is_finite()) => Some("non-finite value".into()),
                _ => None,
            };
            if let Some(reason) = reason {
                *slot = None;
                warnings.push(RecordWarning {
                    id: self.id.clone(),
                    organ: spec.name.clone(),
                    reason,
                });
            }
        }
        warnings
    }

    /// Checks the stored-record invariants against `schema`.
    pub fn validate(&self, schema: &OrganSchema) -> Result<(), DataError> {
        let err = |msg: String| DataError::Record {
            id: self.id.clone(),
            msg,
        };
        if self.organs.len() != schema.len() {
            return Err(err(format!(
                "{} organ slots, schema has {}",
                self.organs.len(),
                schema.len()
            )));
        }
        for (o, v) in self.organs.iter().enumerate() {
            if let Some(v) = v {
                let spec = schema.organ(o);
                if v.len() != spec.feature_dim || v.iter().any(|x| !x.is_finite()) {
                    return Err(err(format!("organ {} is incomplete", spec.name)));
                }
            }
        }
        if self.n_available() == 0 {
            return Err(err("no organ available".into()));
        }
        if let Some((t, v)) = self.labels.iter().find(|(_, v)| **v > 1) {
            return Err(err(format!("label {t} = {v} is not binary")));
        }
        Ok(())
    }

    /// Copy with the organs in `drop` removed.
    pub fn without(&self, drop: OrganSet) -> Self {
        let mut r = self.clone();
        for o in drop.iter() {
            if let Some(slot) = r.organs.get_mut(o) {
                *slot = None;
            }
        }
        r
    }
}
