//! Per-organ cross-attention tokenizer, sequence assembly, transformer
//! backbone and projection heads.

mod capture;
mod encoder;
mod head;

use alloc::string::String;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

pub use capture::{AttentionCapture, CaptureMode};
pub(crate) use encoder::init_scaled;
pub use encoder::{Encoder, EncoderOutput, ViewInput};
pub use head::HeadSpec;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Token width.
    pub d: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    /// Prototype count of the distillation head.
    #[serde(rename = "P")]
    pub proj_dim: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 2,
            heads: 2,
            proj_dim: 64,
            head_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.d == 0 || self.heads == 0 || self.proj_dim == 0 || self.head_hidden == 0 {
            return bad("d, H, P and head_hidden must be positive");
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad("H must divide d");
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("participant {id}: {msg}")]
    Contract { id: String, msg: String },
    #[error("saliency proxy needs full attention matrices")]
    MissingFullCapture,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
