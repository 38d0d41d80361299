//! Downstream evaluation: metrics, linear probing, fine-tuning, organ
//! dropout batteries and saliency tracking.

mod dropout;
mod finetune;
mod metrics;
mod probe;
mod trajectory;

use alloc::string::String;

use thiserror::Error;

use crate::model::ModelError;
use crate::sgm::SgmError;
use crate::tensor::TensorError;

pub use dropout::{
    embed_cohort, leave_one_out_importance, organ_dropout_eval, pairwise_dropout_heatmap, protocol_grid, summarize,
    CellSummary, DropoutEvalConfig, DropoutSpec, Protocol,
};
pub use finetune::{finetune, FinetuneConfig, FinetuneReport};
pub use metrics::{auroc, balanced_accuracy, focal_loss, MetricsRow};
pub use probe::{train_linear_probe, LinearProbe, ProbeConfig};
pub use trajectory::{saliency_trajectory, TrajectoryRow};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("metric needs both classes present")]
    SingleClass,
    #[error("{0} scores but {1} labels")]
    Length(usize, usize),
    #[error("config: {0}")]
    Config(String),
    #[error("participant {id}: {msg}")]
    Contract { id: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sgm(#[from] SgmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
