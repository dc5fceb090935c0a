//! AdamW with one learning rate per parameter group.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Learning rate for the visual-encoder adapters.
    pub lr_adapters: f64,
    /// Learning rate for every other learnable parameter.
    pub lr_other: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a validation mIoU improvement.
    pub patience: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_adapters: 1e-4,
            lr_other: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            epochs: 60,
            batch_size: 4,
            patience: 8,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub config: OptimizerConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        Self { config, step: 0, m: store.zeros_like(), v: store.zeros_like() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn lr_for(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Frozen => 0.0,
            ParamGroup::Adapter => self.config.lr_adapters,
            ParamGroup::Other => self.config.lr_other,
        }
    }

    /// Applies one update. `grads` is indexed like the store and is scaled by
    /// `grad_scale` (e.g. `1 / batch`). Frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], grad_scale: f64) {
        self.step += 1;
        let c = &self.config;
        let mut scale = grad_scale;
        if c.grad_clip > 0.0 {
            let mut sq = 0.0;
            for (id, p) in store.iter() {
                if p.group != ParamGroup::Frozen {
                    sq += grads[id.index()].data().iter().map(|g| g * g).sum::<f64>();
                }
            }
            let norm = math::sqrt(sq) * grad_scale;
            if norm > c.grad_clip {
                scale *= c.grad_clip / norm;
            }
        }
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let group = store.get(id).group;
            if group == ParamGroup::Frozen {
                continue;
            }
            let lr = self.lr_for(group);
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].data();
            let w = store.get_mut(id).value.data_mut();
            for j in 0..w.len() {
                let gj = g[j] * scale;
                let mj = &mut m.data_mut()[j];
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
                let vj = &mut v.data_mut()[j];
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                w[j] -= lr * (mhat / (math::sqrt(vhat) + c.eps) + c.weight_decay * w[j]);
            }
        }
    }
}
