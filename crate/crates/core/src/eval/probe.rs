use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{auroc, balanced_accuracy};
use super::EvalError;
use crate::model::init_scaled;
use crate::rng::{keyed_stream, Purpose, Rng};
use crate::tensor::{AdamW, AdamWConfig, Graph, ParamId, ParamStore, Schedule, Tensor};

/// Linear-probe optimization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Linear warmup length before cosine decay to zero.
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            gamma: 2.0,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 256,
            warmup_epochs: 0,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Config(format!("probe: {m}")));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be >= 0");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be >= 0");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs exceeds epochs");
        }
        Ok(())
    }
}

/// Affine map from an embedding to one logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LinearProbe {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b
    }

    pub fn logits(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.iter().map(|x| self.logit(x)).collect()
    }

    /// `(AUROC, balanced accuracy)` on a labelled set.
    pub fn evaluate(&self, xs: &[Vec<f64>], labels: &[u8]) -> Result<(f64, f64), EvalError> {
        let z = self.logits(xs);
        Ok((auroc(&z, labels)?, balanced_accuracy(&z, labels)?))
    }
}

pub(crate) fn check_labels(labels: &[u8]) -> Result<(), EvalError> {
    let pos = labels.iter().filter(|l| **l != 0).count();
    if pos < 2 || labels.len() - pos < 2 {
        return Err(EvalError::SingleClass);
    }
    Ok(())
}

/// Head parameters and the RNG that then drives batch order. Shared by
/// probing and fine-tuning so that a frozen backbone reproduces the probe.
pub(crate) struct HeadInit {
    pub w: ParamId,
    pub b: ParamId,
    pub rng: Rng,
}

pub(crate) fn init_head(store: &mut ParamStore, d: usize, seed: u64) -> HeadInit {
    let mut rng = keyed_stream(seed, Purpose::Probe, 0);
    let w = store.add("probe.w", init_scaled(&mut rng, &[d, 1], 0.01), true);
    let b = store.add("probe.b", Tensor::zeros(&[1]), false);
    HeadInit { w, b, rng }
}

pub(crate) fn lr_schedule(lr: f64, warmup_epochs: usize, epochs: usize, steps_per_epoch: usize) -> Schedule {
    Schedule::warmup_cosine(0.0, lr, 0.0, warmup_epochs * steps_per_epoch, epochs * steps_per_epoch)
}

pub(crate) fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

pub(crate) fn probe_from_store(store: &ParamStore, w: ParamId, b: ParamId) -> LinearProbe {
    LinearProbe {
        w: store.value(w).data().to_vec(),
        b: store.value(b).data()[0],
    }
}

/// Trains a focal-loss linear probe on fixed embeddings.
pub fn train_linear_probe(xs: &[Vec<f64>], labels: &[u8], cfg: &ProbeConfig) -> Result<LinearProbe, EvalError> {
    cfg.validate()?;
    if xs.len() != labels.len() {
        return Err(EvalError::Length(xs.len(), labels.len()));
    }
    check_labels(labels)?;
    let d = xs[0].len();
    let mut store = ParamStore::new();
    let HeadInit { w, b, mut rng } = init_head(&mut store, d, cfg.seed);
    let mut opt = AdamW::new(&store, AdamWConfig::default());
    let steps_per_epoch = xs.len().div_ceil(cfg.batch_size);
    let sched = lr_schedule(cfg.lr, cfg.warmup_epochs, cfg.epochs, steps_per_epoch);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let order = shuffled(xs.len(), &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| xs[i].clone()).collect();
            let ys: Vec<f64> = chunk.iter().map(|&i| f64::from(labels[i])).collect();
            let mut g = Graph::new();
            let x = g.input(Tensor::from_rows(&rows));
            let loss = head_loss(&mut g, &store, x, w, b, &ys, cfg.alpha, cfg.gamma);
            store.zero_grad();
            g.backward(loss)?.accumulate_into(&mut store);
            let lr = sched.eval_clamped(step);
            opt.step(&mut store, lr, cfg.weight_decay)?;
            step += 1;
        }
    }
    Ok(probe_from_store(&store, w, b))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn head_loss(
    g: &mut Graph,
    store: &ParamStore,
    x: crate::tensor::Var,
    w: ParamId,
    b: ParamId,
    ys: &[f64],
    alpha: f64,
    gamma: f64,
) -> crate::tensor::Var {
    let wv = g.param(store, w);
    let bv = g.param(store, b);
    let z = g.matmul(x, wv);
    let z = g.add_row(z, bv);
    g.focal_loss(z, ys, alpha, gamma)
}
