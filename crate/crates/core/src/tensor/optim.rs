use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::{Tensor, TensorError};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = |s: &ParamStore| {
            s.entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            first: zeros(store),
            second: zeros(store),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor {
        &self.first[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor {
        &self.second[id.index()]
    }

    /// Updates every parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, wd: f64) -> Result<(), TensorError> {
        self.step_filtered(store, lr, wd, |_| true)
    }

    /// Updates only parameters for which `include` holds; excluded parameters
    /// keep their value and moments.
    pub fn step_filtered(
        &mut self,
        store: &mut ParamStore,
        lr: f64,
        wd: f64,
        include: impl Fn(ParamId) -> bool,
    ) -> Result<(), TensorError> {
        debug_assert!(lr >= 0.0 && wd >= 0.0);
        for e in store.entries() {
            if !e.grad.is_finite() {
                return Err(TensorError::NonFinite(e.name.clone()));
            }
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - math::pow(beta1, self.step as f64);
        let bc2 = 1.0 - math::pow(beta2, self.step as f64);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !include(id) {
                continue;
            }
            let i = id.index();
            let entry = &mut store.entries_mut()[i];
            let decay = if entry.decay { 1.0 - lr * wd } else { 1.0 };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let g = entry.grad.data();
            let p = entry.value.data_mut();
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] *= decay;
                p[j] -= lr * mhat / (math::sqrt(vhat) + eps);
            }
        }
        Ok(())
    }
}
