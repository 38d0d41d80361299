//! Multi-organ self-supervised representation learning with saliency-guided
//! organ masking.
//!
//! The crate is `no_std` (it needs `alloc`) and performs no IO. File formats,
//! configuration loading and the command-line front end live in the `sgm`
//! companion crate.
//!
//! Layout:
//! - [`tensor`]: dense `f64` tensors, a define-by-run reverse-mode graph,
//!   AdamW and scalar schedules.
//! - [`data`]: organ schema, participant records, normalization, splits and
//!   the synthetic cohort generator.
//! - [`model`]: per-organ cross-attention tokenizer, token assembly with mask
//!   and organ embeddings, pre-norm transformer backbone, projection heads.
//! - [`sgm`]: attention saliency, masking distribution and budgeted sampling.
//! - [`objectives`]: distillation, KoLeo, NT-Xent, VICReg and Barlow Twins
//!   losses.
//! - [`train`]: the pre-training loop.
//! - [`eval`]: metrics, probing, fine-tuning and organ-dropout batteries.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod math;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod sgm;
pub mod tensor;
pub mod train;

pub use data::{OrganSchema, OrganSpec, ParticipantRecord};
pub use model::{AttentionCapture, Encoder, ModelConfig};
pub use sgm::{SaliencyProxy, SaliencyReport};
pub use tensor::{Graph, ParamStore, Tensor, Var};
pub use train::{DistillConfig, TrainerState};
