use std::collections::BTreeMap;

use crate::float::Float;
use crate::param::{GradStore, Parameters};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with decoupled weight decay. Moments are keyed by parameter name so
/// they can be checkpointed alongside the weights.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub first: BTreeMap<String, Vec<T>>,
    pub second: BTreeMap<String, Vec<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &dyn Parameters<T>) -> Self {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        params.visit(&mut |p| {
            first.insert(p.name.clone(), vec![T::zero(); p.numel()]);
            second.insert(p.name.clone(), vec![T::zero(); p.numel()]);
        });
        AdamW { cfg, step: 0, first, second }
    }

    /// Applies one update with learning rate `lr`.
    pub fn update(&mut self, params: &mut dyn Parameters<T>, grads: &GradStore<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(self.cfg.beta1);
        let b2 = T::lit(self.cfg.beta2);
        let one = T::one();
        let bias1 = T::lit(1.0 - self.cfg.beta1.powi(t));
        let bias2 = T::lit(1.0 - self.cfg.beta2.powi(t));
        let eps = T::lit(self.cfg.eps);
        let lr_t = T::lit(lr);
        let decay = T::lit(lr * self.cfg.weight_decay);
        let first = &mut self.first;
        let second = &mut self.second;
        params.visit_mut(&mut |p| {
            let g = grads.by_id(p.id);
            let m = first.get_mut(&p.name).expect("moment for parameter");
            let v = second.get_mut(&p.name).expect("moment for parameter");
            for i in 0..p.value.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                if p.decay {
                    let w = p.value[i];
                    p.value[i] = w - decay * w;
                }
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                p.value[i] -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}
