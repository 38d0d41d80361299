use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::metrics::focal_loss;
use super::probe::{
    check_labels, head_loss, init_head, lr_schedule, probe_from_store, shuffled, HeadInit, LinearProbe,
};
use super::EvalError;
use crate::data::ParticipantRecord;
use crate::model::{CaptureMode, Encoder, ViewInput};
use crate::tensor::{AdamW, AdamWConfig, Graph, ParamId, ParamStore};

/// Joint backbone + linear head training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Return the parameters of the best validation epoch rather than the
    /// last one.
    pub restore_best: bool,
    pub alpha: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 2e-6,
            lr_head: 1e-3,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 32,
            warmup_epochs: 1,
            patience: 3,
            restore_best: true,
            alpha: 0.75,
            gamma: 2.0,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// Single learning rate for a randomly initialized backbone.
    pub fn random_init() -> Self {
        Self {
            lr_backbone: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Config(format!("finetune: {m}")));
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.gamma >= 0.0) {
            return bad("alpha must lie in (0, 1) and gamma be >= 0");
        }
        if !(self.lr_backbone >= 0.0 && self.lr_head >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates and weight decay must be >= 0");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return bad("epochs, batch_size and patience must be positive");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs exceeds epochs");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub val_losses: Vec<f64>,
    /// Zero-based epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn val_loss(
    encoder: &Encoder,
    store: &ParamStore,
    probe: &LinearProbe,
    val: &[(&ParticipantRecord, u8)],
    cfg: &FinetuneConfig,
) -> Result<f64, EvalError> {
    let views: Vec<ViewInput<'_>> = val.iter().map(|(r, _)| ViewInput::full(r)).collect();
    let xs = encoder.embed(store, &views)?;
    let total: f64 = xs
        .iter()
        .zip(val)
        .map(|(x, (_, y))| focal_loss(probe.logit(x), *y, cfg.alpha, cfg.gamma))
        .sum();
    Ok(total / val.len() as f64)
}

/// Fine-tunes `store` with a fresh linear head on `task`. Returns the tuned
/// encoder parameters (same manifest as `store`) and the head.
pub fn finetune(
    encoder: &Encoder,
    store: &ParamStore,
    train: &[ParticipantRecord],
    val: &[ParticipantRecord],
    task: &str,
    cfg: &FinetuneConfig,
) -> Result<(ParamStore, LinearProbe, FinetuneReport), EvalError> {
    cfg.validate()?;
    encoder.check_store(store)?;
    let train: Vec<(&ParticipantRecord, u8)> = train.iter().filter_map(|r| r.label(task).map(|y| (r, y))).collect();
    let val: Vec<(&ParticipantRecord, u8)> = val.iter().filter_map(|r| r.label(task).map(|y| (r, y))).collect();
    check_labels(&train.iter().map(|t| t.1).collect::<Vec<_>>())?;
    if val.is_empty() {
        return Err(EvalError::Config("finetune: empty validation set".into()));
    }

    let mut work = store.clone();
    let HeadInit { w, b, mut rng } = init_head(&mut work, encoder.config().d, cfg.seed);
    let backbone: Vec<bool> = work
        .entries()
        .iter()
        .map(|e| !(e.name.starts_with("head.") || e.name.starts_with("probe.")))
        .collect();
    let is_head = |id: ParamId| id == w || id == b;
    let mut opt_head = AdamW::new(&work, AdamWConfig::default());
    let mut opt_backbone = AdamW::new(&work, AdamWConfig::default());
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let sched_head = lr_schedule(cfg.lr_head, cfg.warmup_epochs, cfg.epochs, steps_per_epoch);
    let sched_bb = lr_schedule(cfg.lr_backbone, cfg.warmup_epochs, cfg.epochs, steps_per_epoch);

    let mut report = FinetuneReport {
        val_losses: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut stale = 0;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = shuffled(train.len(), &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let views: Vec<ViewInput<'_>> = chunk.iter().map(|&i| ViewInput::full(train[i].0)).collect();
            let ys: Vec<f64> = chunk.iter().map(|&i| f64::from(train[i].1)).collect();
            let mut g = Graph::new();
            let enc = encoder.encode(&mut g, &work, &views, CaptureMode::None)?;
            let loss = head_loss(&mut g, &work, enc.cls, w, b, &ys, cfg.alpha, cfg.gamma);
            work.zero_grad();
            g.backward(loss)?.accumulate_into(&mut work);
            opt_head.step_filtered(&mut work, sched_head.eval_clamped(step), cfg.weight_decay, is_head)?;
            let lr_bb = sched_bb.eval_clamped(step);
            if lr_bb > 0.0 {
                opt_backbone.step_filtered(&mut work, lr_bb, cfg.weight_decay, |id| backbone[id.index()])?;
            }
            step += 1;
        }
        let probe = probe_from_store(&work, w, b);
        let loss = val_loss(encoder, &work, &probe, &val, cfg)?;
        report.val_losses.push(loss);
        if best.as_ref().is_none_or(|(l, _)| loss < *l) {
            report.best_epoch = epoch;
            best = Some((
                loss,
                if cfg.restore_best {
                    work.clone()
                } else {
                    ParamStore::new()
                },
            ));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                report.stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }
    if cfg.restore_best {
        if let Some((_, snap)) = best {
            work = snap;
        }
    }
    let probe = probe_from_store(&work, w, b);
    let mut tuned = store.clone();
    for e in tuned.entries_mut() {
        let src = work.id(&e.name).expect("same layout");
        e.value = work.value(src).clone();
    }
    Ok((tuned, probe, report))
}
