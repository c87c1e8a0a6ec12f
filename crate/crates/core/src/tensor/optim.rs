use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2.5e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam moments for every trainable entry of a [`ParamStore`], in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub step_count: u64,
    pub config: AdamConfig,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = store.ids().map(|id| vec![T::zero(); store.tensor(id).len()]).collect();
        Self { step_count: 0, config, first_moment: zeros.clone(), second_moment: zeros }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// One bias-corrected Adam update of every trainable parameter. Gradients are
/// left in place; the caller resets them.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.first_moment.len() != store.len() {
        return Err(Error::contract("optimizer state does not match the parameter store"));
    }
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        if store.is_trainable(id) && store.tensor(id).grad().is_none() {
            return Err(Error::MissingGrad(store.name(id).to_string()));
        }
    }
    state.step_count += 1;
    let c = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let step = T::of(c.lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(c.epsilon);
    let wd = T::of(c.weight_decay);
    for (k, &id) in ids.iter().enumerate() {
        if !store.is_trainable(id) {
            continue;
        }
        let tensor = store.tensor_mut(id);
        let grad = tensor.grad().expect("checked above").to_vec();
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        for (i, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i] + wd * *p;
            m[i] = b1 * m[i] + ob1 * g;
            v[i] = b2 * v[i] + ob2 * g * g;
            *p -= step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Learning rate multiplied by `gamma` at each milestone epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiStepSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl MultiStepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.gamma.powi(passed as i32)
    }
}
