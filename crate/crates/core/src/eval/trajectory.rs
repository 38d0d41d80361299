use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data::{OrganSet, ParticipantRecord};
use crate::model::{CaptureMode, Encoder, ViewInput};
use crate::sgm::{organ_saliency, SaliencyProxy};
use crate::tensor::ParamStore;

/// Mean saliency shares of one checkpoint. `organ_shares` plus `cls_share`
/// sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub organ_shares: Vec<f64>,
    pub cls_share: f64,
}

/// Saliency shares over a fixed full-view sample for each `(step, params)`
/// checkpoint. Attention mass on mask tokens counts toward their organ, so
/// shares are defined even for participants missing organs.
pub fn saliency_trajectory(
    encoder: &Encoder,
    checkpoints: &[(usize, &ParamStore)],
    sample: &[ParticipantRecord],
    proxy: SaliencyProxy,
) -> Result<Vec<TrajectoryRow>, EvalError> {
    if sample.is_empty() {
        return Err(EvalError::Config("empty saliency sample".into()));
    }
    let schema = encoder.schema();
    let all = OrganSet::all(schema.len());
    let mode = if proxy.needs_full_capture() {
        CaptureMode::Full
    } else {
        CaptureMode::ClsRows
    };
    let views: Vec<ViewInput<'_>> = sample.iter().map(ViewInput::full).collect();
    let mut rows = Vec::with_capacity(checkpoints.len());
    for &(step, store) in checkpoints {
        encoder.check_store(store)?;
        let caps = encoder.capture(store, &views, mode)?;
        let mut shares = vec![0.0; schema.len()];
        let mut cls = 0.0;
        for cap in &caps {
            let (scores, self_mass) = organ_saliency(cap, schema, all, proxy)?;
            for (s, v) in shares.iter_mut().zip(scores) {
                *s += v.unwrap_or(0.0);
            }
            cls += self_mass;
        }
        let n = caps.len() as f64;
        rows.push(TrajectoryRow {
            step,
            organ_shares: shares.into_iter().map(|s| s / n).collect(),
            cls_share: cls / n,
        });
    }
    Ok(rows)
}
