//! Adam over a chosen subset of model parameters.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::segcore::{Model, ModelGrads, ParamId, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with moment estimates kept in `f64`, keyed by parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    targets: BTreeSet<ParamId>,
    steps: u64,
    first: BTreeMap<ParamId, Vec<f64>>,
    second: BTreeMap<ParamId, Vec<f64>>,
}

impl Adam {
    /// An optimizer that will only ever touch `targets`.
    pub fn new(config: AdamConfig, targets: BTreeSet<ParamId>) -> Self {
        Self {
            config,
            targets,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn targets(&self) -> &BTreeSet<ParamId> {
        &self.targets
    }

    pub fn step<T: Real>(&mut self, model: &mut Model<T>, grads: &ModelGrads<T>) {
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for &id in &self.targets {
            let g = grads.get(id);
            if g.is_empty() {
                continue;
            }
            let params = model.param_mut(id);
            assert_eq!(g.len(), params.len(), "gradient length for {id:?}");
            let m = self.first.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            for (((p, &gi), mi), vi) in params.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let update = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *p = T::from_f64_lossy(p.as_f64() - update);
            }
        }
    }
}
