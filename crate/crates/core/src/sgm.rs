//! Saliency-guided organ masking.
//!
//! Teacher CLS attention is summed over each organ's token span to give a
//! saliency score; a temperature softmax over available organs turns scores
//! into masking probabilities; a budgeted sequential draw without
//! replacement picks the organs to hide from the student.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{OrganSchema, OrganSet};
use crate::math;
use crate::model::AttentionCapture;

pub const DEFAULT_TAU: f64 = 0.25;
pub const DEFAULT_MASK_RATIO: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SgmError {
    #[error("config: {0}")]
    Config(String),
    #[error("no organ is available")]
    NoneAvailable,
    #[error("rollout saliency needs full attention matrices")]
    MissingFullCapture,
    #[error("capture covers {got} positions, schema needs {want}")]
    CaptureShape { got: usize, want: usize },
}

/// Rule mapping captured attention to per-organ importance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SaliencyProxy {
    /// CLS rows of the last layer, averaged over heads.
    #[serde(rename = "a1", alias = "last_layer")]
    LastLayer,
    /// CLS rows averaged over all layers and heads.
    #[default]
    #[serde(rename = "a2", alias = "all_layer_average")]
    AllLayerAverage,
    /// CLS row of the product of residual-adjusted, head-averaged matrices.
    #[serde(rename = "a3", alias = "rollout")]
    Rollout,
}

impl SaliencyProxy {
    pub fn needs_full_capture(self) -> bool {
        self == SaliencyProxy::Rollout
    }
}

/// Saliency for one participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    /// Per-organ score; `None` for unavailable organs.
    pub scores: Vec<Option<f64>>,
    /// Masking probabilities; exactly zero on unavailable organs.
    pub probs: Vec<f64>,
    pub cls_self_mass: f64,
    pub proxy: SaliencyProxy,
    pub tau: f64,
}

/// Per-organ saliency and the CLS self-attention mass.
pub fn organ_saliency(
    capture: &AttentionCapture,
    schema: &OrganSchema,
    available: OrganSet,
    proxy: SaliencyProxy,
) -> Result<(Vec<Option<f64>>, f64), SgmError> {
    let n = schema.n_tokens() + 1;
    if capture.n != n {
        return Err(SgmError::CaptureShape {
            got: capture.n,
            want: n,
        });
    }
    let row: Vec<f64> = match proxy {
        SaliencyProxy::LastLayer | SaliencyProxy::AllLayerAverage => {
            let layers = match proxy {
                SaliencyProxy::LastLayer => capture.layers.saturating_sub(1)..capture.layers,
                _ => 0..capture.layers,
            };
            let mut acc = vec![0.0; n];
            let mut count = 0usize;
            for l in layers {
                for h in 0..capture.heads {
                    for (a, v) in acc.iter_mut().zip(capture.cls_row(l, h)) {
                        *a += v;
                    }
                    count += 1;
                }
            }
            acc.iter().map(|v| v / count.max(1) as f64).collect()
        }
        SaliencyProxy::Rollout => {
            if capture.full.is_none() {
                return Err(SgmError::MissingFullCapture);
            }
            let mut r = vec![0.0; n];
            r[0] = 1.0;
            for l in (0..capture.layers).rev() {
                let m = capture.matrix(l).unwrap();
                let mut next = vec![0.0; n];
                for (i, ri) in r.iter().enumerate() {
                    if *ri == 0.0 {
                        continue;
                    }
                    let row = &m[i * n..(i + 1) * n];
                    for (j, v) in next.iter_mut().enumerate() {
                        let adj = 0.5 * row[j] + if i == j { 0.5 } else { 0.0 };
                        *v += ri * adj;
                    }
                }
                r = next;
            }
            r
        }
    };
    let scores = schema
        .spans()
        .iter()
        .enumerate()
        .map(|(o, span)| {
            available
                .contains(o)
                .then(|| row[1 + span.start..1 + span.end].iter().sum())
        })
        .collect();
    Ok((scores, row[0]))
}

/// Temperature softmax over the available organs' scores.
pub fn masking_distribution(scores: &[Option<f64>], tau: f64) -> Result<Vec<f64>, SgmError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(SgmError::Config(format!("tau must be positive, got {tau}")));
    }
    let max = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(SgmError::NoneAvailable);
    }
    let mut p: Vec<f64> = scores
        .iter()
        .map(|s| s.map_or(0.0, |s| math::exp((s - max) / tau)))
        .collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    Ok(p)
}

pub fn saliency_report(
    capture: &AttentionCapture,
    schema: &OrganSchema,
    available: OrganSet,
    proxy: SaliencyProxy,
    tau: f64,
) -> Result<SaliencyReport, SgmError> {
    let (scores, cls_self_mass) = organ_saliency(capture, schema, available, proxy)?;
    let probs = masking_distribution(&scores, tau)?;
    Ok(SaliencyReport {
        scores,
        probs,
        cls_self_mass,
        proxy,
        tau,
    })
}

/// Masking budget for one participant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskBudget {
    pub r_mask: f64,
    pub n_max: usize,
}

impl MaskBudget {
    /// `n_max = min(floor(n_avail·r), n_avail − 1)`.
    pub fn new(n_avail: usize, r_mask: f64) -> Self {
        let by_ratio = math::floor(n_avail as f64 * r_mask) as usize;
        Self {
            r_mask,
            n_max: by_ratio.min(n_avail.saturating_sub(1)),
        }
    }
}

pub fn check_mask_ratio(r_mask: f64) -> Result<(), SgmError> {
    if r_mask > 0.0 && r_mask < 1.0 {
        Ok(())
    } else {
        Err(SgmError::Config(format!("r_mask must lie in (0, 1), got {r_mask}")))
    }
}

/// `n_mask ~ Uniform{1..n_max}`, or 0 when `n_max < 1`. Always consumes one
/// draw so that the stream position does not depend on availability.
pub fn sample_mask_budget<R: rand::Rng + ?Sized>(n_avail: usize, r_mask: f64, rng: &mut R) -> usize {
    let b = MaskBudget::new(n_avail, r_mask);
    let u: u64 = rng.random();
    if b.n_max < 1 {
        0
    } else {
        1 + (u % b.n_max as u64) as usize
    }
}

/// Sequential draws without replacement, each proportional to the remaining
/// weights. Stops early if positive weights run out.
pub fn sample_mask_set<R: rand::Rng + ?Sized>(p: &[f64], n_mask: usize, rng: &mut R) -> OrganSet {
    let mut w = p.to_vec();
    let mut out = OrganSet::EMPTY;
    for _ in 0..n_mask {
        let total: f64 = w.iter().filter(|v| **v > 0.0).sum();
        if total <= 0.0 {
            break;
        }
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (o, v) in w.iter().enumerate() {
            if *v > 0.0 {
                acc += v;
                pick = Some(o);
                if u < acc {
                    break;
                }
            }
        }
        let o = pick.unwrap();
        out.insert(o);
        w[o] = 0.0;
    }
    out
}

/// Uniform distribution over `available` on `n_organs` slots.
pub fn uniform_distribution(available: OrganSet, n_organs: usize) -> Vec<f64> {
    let k = available.len() as f64;
    (0..n_organs)
        .map(|o| if available.contains(o) { 1.0 / k } else { 0.0 })
        .collect()
}

/// Baseline: same budget, uniform organ choice.
pub fn random_mask_set<R: rand::Rng + ?Sized>(
    available: OrganSet,
    n_organs: usize,
    r_mask: f64,
    rng: &mut R,
) -> OrganSet {
    let n = sample_mask_budget(available.len(), r_mask, rng);
    sample_mask_set(&uniform_distribution(available, n_organs), n, rng)
}

/// Saliency-guided mask: same budget, draws follow `p`.
pub fn sgm_mask_set<R: rand::Rng + ?Sized>(p: &[f64], available: OrganSet, r_mask: f64, rng: &mut R) -> OrganSet {
    let n = sample_mask_budget(available.len(), r_mask, rng);
    sample_mask_set(p, n, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn budget_formula() {
        assert_eq!(MaskBudget::new(7, 0.5).n_max, 3);
        assert_eq!(MaskBudget::new(1, 0.5).n_max, 0);
        assert_eq!(MaskBudget::new(2, 0.5).n_max, 1);
        let mut rng = stream(0, Purpose::Masking);
        for _ in 0..100 {
            assert_eq!(sample_mask_budget(2, 0.5, &mut rng), 1);
            assert_eq!(sample_mask_budget(1, 0.5, &mut rng), 0);
            let n = sample_mask_budget(7, 0.5, &mut rng);
            assert!((1..=3).contains(&n));
        }
    }

    #[test]
    fn two_organ_distribution() {
        let p = masking_distribution(&[Some(0.4), Some(0.2)], 0.25).unwrap();
        let e = libm::exp(0.8);
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.6900).abs() < 5e-5);
    }

    #[test]
    fn unavailable_is_exactly_zero() {
        let p = masking_distribution(&[Some(0.1), Some(0.3), None, Some(0.2)], 0.25).unwrap();
        assert_eq!(p[2], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_tau_is_config_error() {
        assert!(matches!(
            masking_distribution(&[Some(0.0)], 0.0),
            Err(SgmError::Config(_))
        ));
        assert!(matches!(
            masking_distribution(&[Some(0.0)], -1.0),
            Err(SgmError::Config(_))
        ));
    }

    #[test]
    fn one_hot_distribution_always_picks_it() {
        let mut rng = stream(1, Purpose::Masking);
        let p = [0.0, 0.0, 1.0, 0.0];
        for _ in 0..1000 {
            assert_eq!(sample_mask_set(&p, 1, &mut rng), OrganSet::single(2));
        }
    }

    #[test]
    fn support_exhaustion_stops_early() {
        let mut rng = stream(2, Purpose::Masking);
        let m = sample_mask_set(&[0.5, 0.5, 0.0], 3, &mut rng);
        assert_eq!(m, OrganSet::from_indices([0, 1]));
    }
}
