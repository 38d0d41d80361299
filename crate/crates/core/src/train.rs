//! Pre-training loop.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{OrganSet, ParticipantRecord};
use crate::model::{CaptureMode, Encoder, ModelError, ViewInput};
use crate::objectives::{dino_global_loss, ema_update, koleo_loss, teacher_targets, update_center, Objective};
use crate::rng::{stream, Purpose, Rng};
use crate::sgm::{
    check_mask_ratio, random_mask_set, saliency_report, sgm_mask_set, SaliencyProxy, SaliencyReport, SgmError,
};
use crate::tensor::{AdamW, AdamWConfig, Graph, ParamStore, Schedule, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingStrategy {
    #[default]
    Sgm,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_end: f64,
    pub lr_warmup_epochs: usize,
    pub wd_start: f64,
    pub wd_end: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub teacher_temp_start: f64,
    pub teacher_temp_end: f64,
    pub teacher_temp_warmup_epochs: usize,
    pub student_temp: f64,
    pub center_momentum: f64,
    pub koleo_weight: f64,
    pub freeze_last_layer_epochs: usize,
    pub r_mask: f64,
    pub tau: f64,
    pub strategy: MaskingStrategy,
    pub proxy: SaliencyProxy,
    pub objective: Objective,
    pub seed: u64,
    /// Saliency summaries are reported every this many steps (0: never).
    pub saliency_every: usize,
    pub adamw: AdamWConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-4,
            lr_end: 1e-6,
            lr_warmup_epochs: 10,
            wd_start: 0.04,
            wd_end: 0.4,
            ema_start: 0.992,
            ema_end: 1.0,
            teacher_temp_start: 0.04,
            teacher_temp_end: 0.07,
            teacher_temp_warmup_epochs: 10,
            student_temp: 0.1,
            center_momentum: 0.9,
            koleo_weight: 0.1,
            freeze_last_layer_epochs: 1,
            r_mask: 0.5,
            tau: 0.25,
            strategy: MaskingStrategy::Sgm,
            proxy: SaliencyProxy::AllLayerAverage,
            objective: Objective::Dino,
            seed: 0,
            saliency_every: 10,
            adamw: AdamWConfig::default(),
        }
    }
}

/// Per-step values of every scheduled hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedules {
    pub lr: Schedule,
    pub wd: Schedule,
    pub momentum: Schedule,
    pub teacher_temp: Schedule,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs: must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size: must be at least 2");
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lr_end", self.lr_end),
            ("wd_start", self.wd_start),
            ("wd_end", self.wd_end),
            ("koleo_weight", self.koleo_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TrainError::Config(alloc::format!(
                    "{name}: must be finite and non-negative"
                )));
            }
        }
        for (name, v) in [
            ("teacher_temp_start", self.teacher_temp_start),
            ("teacher_temp_end", self.teacher_temp_end),
            ("student_temp", self.student_temp),
            ("tau", self.tau),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(TrainError::Config(alloc::format!("{name}: must be positive")));
            }
        }
        for (name, v) in [
            ("ema_start", self.ema_start),
            ("ema_end", self.ema_end),
            ("center_momentum", self.center_momentum),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrainError::Config(alloc::format!("{name}: must lie in [0, 1]")));
            }
        }
        check_mask_ratio(self.r_mask).map_err(|_| TrainError::Config("r_mask: must lie in (0, 1)".into()))?;
        self.objective
            .validate()
            .map_err(|m| TrainError::Config(alloc::format!("objective: {m}")))?;
        Ok(())
    }

    pub fn schedules(&self, steps_per_epoch: usize) -> Schedules {
        let total = self.epochs * steps_per_epoch;
        let warm = |e: usize| (e * steps_per_epoch).min(total);
        Schedules {
            lr: Schedule::warmup_cosine(0.0, self.lr, self.lr_end, warm(self.lr_warmup_epochs), total),
            wd: Schedule::cosine(self.wd_start, self.wd_end, total),
            momentum: Schedule::cosine(self.ema_start, self.ema_end, total),
            teacher_temp: Schedule::warmup_cosine(
                self.teacher_temp_start,
                self.teacher_temp_end,
                self.teacher_temp_end,
                warm(self.teacher_temp_warmup_epochs),
                total,
            ),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("step {step}: {source}")]
    Optimizer { step: usize, source: TensorError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sgm(#[from] SgmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("observer: {0}")]
    Observer(String),
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Global alignment term, or the plug-in loss.
    pub main: f64,
    pub koleo: f64,
    pub lr: f64,
    pub wd: f64,
    pub momentum: f64,
    pub teacher_temp: f64,
}

/// Batch-mean saliency at one step. Scores and probabilities are averaged
/// over the participants for which the organ was available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencySummary {
    pub step: usize,
    pub epoch: usize,
    pub scores: Vec<Option<f64>>,
    pub probs: Vec<Option<f64>>,
    pub cls_self_mass: f64,
}

impl SaliencySummary {
    pub fn from_reports(step: usize, epoch: usize, reports: &[SaliencyReport]) -> Self {
        let n_organs = reports.first().map_or(0, |r| r.scores.len());
        let mut scores = Vec::with_capacity(n_organs);
        let mut probs = Vec::with_capacity(n_organs);
        for o in 0..n_organs {
            let (mut s, mut p, mut k) = (0.0, 0.0, 0usize);
            for r in reports {
                if let Some(v) = r.scores[o] {
                    s += v;
                    p += r.probs[o];
                    k += 1;
                }
            }
            scores.push((k > 0).then(|| s / k as f64));
            probs.push((k > 0).then(|| p / k as f64));
        }
        let cls_self_mass = reports.iter().map(|r| r.cls_self_mass).sum::<f64>() / reports.len().max(1) as f64;
        Self {
            step,
            epoch,
            scores,
            probs,
            cls_self_mass,
        }
    }
}

/// Hooks for logging and checkpointing. Returning an error aborts training.
pub trait TrainObserver {
    fn on_step(&mut self, _stats: &StepStats) -> Result<(), String> {
        Ok(())
    }
    fn on_saliency(&mut self, _summary: &SaliencySummary) -> Result<(), String> {
        Ok(())
    }
    /// Called after epoch `epoch` (1-based) completes.
    fn on_epoch_end(&mut self, _epoch: usize, _state: &TrainerState) -> Result<(), String> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub optimizer: AdamW,
    pub center: Vec<f64>,
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub data_rng: Rng,
    pub mask_rng: Rng,
    pub history: Vec<StepStats>,
}

/// Drives pre-training of one encoder over a fixed record set.
pub struct Trainer<'a> {
    encoder: &'a Encoder,
    records: &'a [ParticipantRecord],
    cfg: DistillConfig,
    schedules: Schedules,
    steps_per_epoch: usize,
    pub state: TrainerState,
}

/// Splits `order` into batches of `size`; a trailing batch smaller than two
/// is merged into the previous one.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let n = out.len();
        let start = (n - 2) * size;
        out.truncate(n - 2);
        out.push(&order[start..]);
    }
    out
}

impl<'a> Trainer<'a> {
    pub fn new(
        encoder: &'a Encoder,
        init: ParamStore,
        records: &'a [ParticipantRecord],
        cfg: DistillConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        encoder.check_store(&init)?;
        if records.len() < 2 {
            return Err(TrainError::Config("need at least two records".into()));
        }
        let steps_per_epoch = batches(&(0..records.len()).collect::<Vec<_>>(), cfg.batch_size).len();
        let schedules = cfg.schedules(steps_per_epoch);
        let state = TrainerState {
            optimizer: AdamW::new(&init, cfg.adamw),
            teacher: init.clone(),
            student: init,
            center: alloc::vec![0.0; encoder.head_spec().out_dim()],
            step: 0,
            epoch: 0,
            data_rng: stream(cfg.seed, Purpose::Data),
            mask_rng: stream(cfg.seed, Purpose::Masking),
            history: Vec::new(),
        };
        Ok(Self {
            encoder,
            records,
            cfg,
            schedules,
            steps_per_epoch,
            state,
        })
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.cfg.epochs
    }

    pub fn schedules(&self) -> &Schedules {
        &self.schedules
    }

    /// Shuffled record order for the next epoch.
    pub fn epoch_order(&mut self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.shuffle(&mut self.state.data_rng);
        order
    }

    fn capture_mode(&self, want_saliency: bool) -> CaptureMode {
        if self.cfg.strategy == MaskingStrategy::Sgm || want_saliency {
            if self.cfg.proxy.needs_full_capture() {
                CaptureMode::Full
            } else {
                CaptureMode::ClsRows
            }
        } else {
            CaptureMode::None
        }
    }

    /// Draws the student mask of every participant. `captures` is empty
    /// unless saliency was captured.
    fn masks(
        &mut self,
        batch: &[&ParticipantRecord],
        captures: &[crate::model::AttentionCapture],
    ) -> Result<(Vec<OrganSet>, Vec<SaliencyReport>), TrainError> {
        let schema = self.encoder.schema();
        let mut masks = Vec::with_capacity(batch.len());
        let mut reports = Vec::with_capacity(captures.len());
        for (b, r) in batch.iter().enumerate() {
            let avail = r.availability();
            let report = match captures.get(b) {
                Some(c) => Some(saliency_report(c, schema, avail, self.cfg.proxy, self.cfg.tau)?),
                None => None,
            };
            let m = match (self.cfg.strategy, &report) {
                (MaskingStrategy::Sgm, Some(rep)) => {
                    sgm_mask_set(&rep.probs, avail, self.cfg.r_mask, &mut self.state.mask_rng)
                }
                _ => random_mask_set(avail, schema.len(), self.cfg.r_mask, &mut self.state.mask_rng),
            };
            masks.push(m);
            reports.extend(report);
        }
        Ok((masks, reports))
    }

    /// One optimization step on the records at `idx`.
    pub fn train_step(&mut self, idx: &[usize], observer: &mut dyn TrainObserver) -> Result<StepStats, TrainError> {
        let step = self.state.step;
        let s = &self.schedules;
        let lr = s.lr.eval_clamped(step);
        let wd = s.wd.eval_clamped(step);
        let momentum = s.momentum.eval_clamped(step);
        let teacher_temp = s.teacher_temp.eval_clamped(step);
        let freeze = self.state.epoch < self.cfg.freeze_last_layer_epochs;
        let want_saliency = self.cfg.saliency_every > 0 && step.is_multiple_of(self.cfg.saliency_every);
        let capture = self.capture_mode(want_saliency);
        let batch: Vec<&ParticipantRecord> = idx.iter().map(|&i| &self.records[i]).collect();
        let full: Vec<ViewInput<'_>> = batch.iter().map(|r| ViewInput::full(r)).collect();
        let encoder = self.encoder;

        let mut g = Graph::new();
        let (loss, main, koleo, teacher_logits, reports) = if self.cfg.objective.is_distillation() {
            let mut tg = Graph::no_grad();
            let t_out = encoder.encode(&mut tg, &self.state.teacher, &full, capture)?;
            let t_logits = encoder.head(&mut tg, &self.state.teacher, t_out.cls, false);
            let t_logits = tg.value(t_logits).clone();
            drop(full);
            let (masks, reports) = self.masks(&batch, &t_out.captures)?;
            let views = batch
                .iter()
                .zip(&masks)
                .map(|(r, m)| ViewInput::masked(r, *m))
                .collect::<Result<Vec<_>, _>>()?;
            let s_out = encoder.encode(&mut g, &self.state.student, &views, CaptureMode::None)?;
            let s_logits = encoder.head(&mut g, &self.state.student, s_out.cls, freeze);
            let targets = teacher_targets(&t_logits, &self.state.center, teacher_temp);
            let lg = dino_global_loss(&mut g, s_logits, &targets, self.cfg.student_temp);
            let lk = koleo_loss(&mut g, s_out.cls);
            let lk_w = g.scale(lk, self.cfg.koleo_weight);
            let loss = g.add(lg, lk_w);
            let (main, koleo) = (g.value(lg).item(), g.value(lk).item());
            (loss, main, koleo, Some(t_logits), reports)
        } else {
            let out1 = encoder.encode(&mut g, &self.state.student, &full, capture)?;
            let (masks, reports) = self.masks(&batch, &out1.captures)?;
            let views = batch
                .iter()
                .zip(&masks)
                .map(|(r, m)| ViewInput::masked(r, *m))
                .collect::<Result<Vec<_>, _>>()?;
            let out2 = encoder.encode(&mut g, &self.state.student, &views, CaptureMode::None)?;
            let z1 = encoder.head(&mut g, &self.state.student, out1.cls, false);
            let z2 = encoder.head(&mut g, &self.state.student, out2.cls, false);
            let loss = self
                .cfg
                .objective
                .plugin_loss(&mut g, z1, z2)
                .expect("plug-in objective");
            let main = g.value(loss).item();
            (loss, main, 0.0, None, reports)
        };

        let total = g.value(loss).item();
        if !total.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        self.state.student.zero_grad();
        let grads = g.backward(loss)?;
        grads.accumulate_into(&mut self.state.student);
        drop(g);
        let frozen = if freeze { encoder.head_last_layer() } else { None };
        self.state
            .optimizer
            .step_filtered(&mut self.state.student, lr, wd, |id| Some(id) != frozen)
            .map_err(|source| TrainError::Optimizer { step, source })?;
        match teacher_logits {
            Some(t) => {
                ema_update(&mut self.state.teacher, &self.state.student, momentum)?;
                update_center(&mut self.state.center, &t, self.cfg.center_momentum);
            }
            None => self.state.teacher.copy_values_from(&self.state.student)?,
        }

        let stats = StepStats {
            step,
            epoch: self.state.epoch + 1,
            loss: total,
            main,
            koleo,
            lr,
            wd,
            momentum,
            teacher_temp,
        };
        self.state.step += 1;
        self.state.history.push(stats);
        observer.on_step(&stats).map_err(TrainError::Observer)?;
        if want_saliency && !reports.is_empty() {
            let summary = SaliencySummary::from_reports(step, stats.epoch, &reports);
            observer.on_saliency(&summary).map_err(TrainError::Observer)?;
        }
        Ok(stats)
    }

    /// Runs one full epoch.
    pub fn train_epoch(&mut self, observer: &mut dyn TrainObserver) -> Result<f64, TrainError> {
        let order = self.epoch_order();
        let mut sum = 0.0;
        let bs = batches(&order, self.cfg.batch_size);
        for b in &bs {
            sum += self.train_step(b, observer)?.loss;
        }
        self.state.epoch += 1;
        observer
            .on_epoch_end(self.state.epoch, &self.state)
            .map_err(TrainError::Observer)?;
        Ok(sum / bs.len() as f64)
    }

    /// Runs the remaining epochs; returns the per-epoch mean losses.
    pub fn run(&mut self, observer: &mut dyn TrainObserver) -> Result<Vec<f64>, TrainError> {
        let mut means = Vec::new();
        while self.state.epoch < self.cfg.epochs {
            means.push(self.train_epoch(observer)?);
        }
        Ok(means)
    }

    pub fn into_state(self) -> TrainerState {
        self.state
    }
}

/// Convenience wrapper: trains from `init` and returns the final state.
pub fn pretrain(
    encoder: &Encoder,
    init: ParamStore,
    records: &[ParticipantRecord],
    cfg: DistillConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainerState, TrainError> {
    let mut t = Trainer::new(encoder, init, records, cfg)?;
    t.run(observer)?;
    Ok(t.into_state())
}
