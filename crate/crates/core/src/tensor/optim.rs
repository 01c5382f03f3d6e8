use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// only decayed.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, p) in store.iter_mut() {
            let data = p.data_mut();
            let decay = 1.0 - lr * c.weight_decay;
            let Some(g) = grads.get(name) else {
                if c.weight_decay != 0.0 {
                    data.iter_mut().for_each(|w| *w *= decay);
                }
                continue;
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; data.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; data.len()]);
            for i in 0..data.len() {
                let gi = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] = data[i] * decay - lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// Cosine annealing from `base_lr` to `min_lr` over `total_steps`, with an
/// optional linear warmup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule {
            base_lr: 1e-3,
            min_lr: 1e-5,
            total_steps: 100,
            warmup_steps: 0,
        };
        assert!((s.lr(0) - 1e-3).abs() < 1e-15);
        assert!((s.lr(50) - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-12);
        assert!((s.lr(100) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn adamw_descends_quadratic() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(vec![3.0, -2.0]));
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..200 {
            let w = store.get("w").unwrap().clone();
            let g: Vec<f64> = w.data().iter().map(|x| 2.0 * x).collect();
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::row(g));
            opt.step(&mut store, &grads, 0.1);
        }
        let w = store.get("w").unwrap();
        assert!(w.data().iter().all(|x| x.abs() < 0.05), "{:?}", w.data());
    }
}
