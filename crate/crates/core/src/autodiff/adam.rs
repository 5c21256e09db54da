use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Learning rate per parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub pretrained_text: f64,
    pub pretrained_visual: f64,
    pub task_specific: f64,
}

impl LearningRates {
    pub fn uniform(lr: f64) -> Self {
        LearningRates { pretrained_text: lr, pretrained_visual: lr, task_specific: lr }
    }

    /// 5e-5 for the visual encoder, 1e-4 for everything else.
    pub fn gentle() -> Self {
        LearningRates { pretrained_text: 1e-4, pretrained_visual: 5e-5, task_specific: 1e-4 }
    }

    pub fn desk() -> Self {
        LearningRates::uniform(1e-3)
    }

    pub fn for_group(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::PretrainedText => self.pretrained_text,
            ParamGroup::PretrainedVisual => self.pretrained_visual,
            ParamGroup::TaskSpecific => self.task_specific,
        }
    }
}

/// Adam moments and step counter for every parameter of one store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr: LearningRates,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: LearningRates) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdamState { step: 0, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, lr, m: zeros.clone(), v: zeros }
    }

    /// One Adam update. Frozen parameters (and their moments) are left untouched;
    /// all gradients are cleared afterwards.
    pub fn step(&mut self, store: &mut ParamStore, frozen: &HashSet<ParamId>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            if !frozen.contains(&id) && store.get(id).grad.is_none() {
                return Err(Error::contract(format!("missing gradient for {}", store.get(id).name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in store.ids() {
            if frozen.contains(&id) {
                continue;
            }
            let p = store.get_mut(id);
            let lr = self.lr.for_group(p.group);
            let grad = p.grad.take().expect("checked above");
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
