//! Organ schema, participant records, normalization, splits and the
//! synthetic cohort generator.

mod cohort;
mod norm;
mod organ_set;
mod record;
mod schema;
mod split;

use alloc::string::String;

use thiserror::Error;

pub use cohort::{generate_cohort, CohortGenConfig, GeneratedCohort, TaskDef};
pub use norm::{compute_norm_stats, NormStats};
pub use organ_set::OrganSet;
pub use record::{ParticipantRecord, RecordWarning};
pub use schema::{OrganSchema, OrganSpec};
pub use split::{split_cohort, Splits};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("schema: {0}")]
    Schema(String),
    #[error("organ {0} is observed in fewer than two records")]
    Unobserved(String),
    #[error("config: {0}")]
    Config(String),
    #[error("record {id}: {msg}")]
    Record { id: String, msg: String },
}
