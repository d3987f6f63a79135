//! Gradient accumulation, SGD and Adam with cosine decay.

use alloc::vec;
use alloc::vec::Vec;

use super::{Gradients, ParamStore};

/// Sum of per-example parameter gradients over a mini-batch.
#[derive(Debug, Clone)]
pub struct GradAccum {
    grads: Vec<Option<Vec<f64>>>,
    count: usize,
}

impl GradAccum {
    pub fn new(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()], count: 0 }
    }

    pub fn add(&mut self, g: &Gradients) {
        for (id, grad) in g.params() {
            let slot = self.grads[id.index()].get_or_insert_with(|| vec![0.0; grad.len()]);
            for (s, v) in slot.iter_mut().zip(grad) {
                *s += v;
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn get(&self, index: usize) -> Option<&[f64]> {
        self.grads.get(index)?.as_deref()
    }

    /// Mean gradient per parameter (sum divided by the number of examples).
    pub fn mean(&self, index: usize) -> Option<Vec<f64>> {
        let n = self.count.max(1) as f64;
        self.get(index).map(|g| g.iter().map(|v| v / n).collect())
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.count = 0;
    }
}

/// Cosine decay from `base` to zero over `total` steps.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    pub base: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total == 0 {
            return self.base;
        }
        let t = (step.min(self.total)) as f64 / self.total as f64;
        self.base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
    }
}

/// Plain gradient descent. Frozen parameters are skipped entirely.
pub fn sgd_step(store: &mut ParamStore, acc: &GradAccum, lr: f64) {
    for i in 0..store.len() {
        let id = super::ParamId(i);
        if store.get(id).frozen {
            continue;
        }
        if let Some(g) = acc.mean(i) {
            for (p, gv) in store.get_mut(id).tensor.data_mut().iter_mut().zip(&g) {
                *p -= lr * gv;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![None; store.len()], v: vec![None; store.len()] }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with the mean of the accumulated gradients. Frozen
    /// parameters and parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, acc: &GradAccum, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for i in 0..store.len() {
            let id = super::ParamId(i);
            if store.get(id).frozen {
                continue;
            }
            let Some(g) = acc.mean(i) else { continue };
            let m = self.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let data = store.get_mut(id).tensor.data_mut();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                data[k] -= lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }
}
