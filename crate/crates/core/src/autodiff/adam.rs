use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Rebuilds optimizer state, e.g. from a checkpoint.
    pub fn from_state(
        config: AdamConfig,
        step: u64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
        store: &ParamStore,
    ) -> Result<Self, AutodiffError> {
        if first.len() != store.len() || second.len() != store.len() {
            return Err(AutodiffError::OptimizerState(format!(
                "{} / {} moment buffers for {} parameters",
                first.len(),
                second.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            let n = store.value(id).len();
            if first[id.index()].len() != n || second[id.index()].len() != n {
                return Err(AutodiffError::OptimizerState(format!(
                    "moment buffer size mismatch for {}",
                    store.name(id)
                )));
            }
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// Applies one update with learning rate `lr` (the caller's schedule).
    /// Gradients are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<(), AutodiffError> {
        if let Some(id) = store.ids().find(|&id| store.grad(id).is_none()) {
            return Err(AutodiffError::MissingGrad(store.name(id).to_string()));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let grad = store.grad(id).expect("checked above").data().to_vec();
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let value = store.value_mut(id).data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                value[i] -= lr * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Linear ramp over the first `warmup` steps, constant afterwards.
/// `step` counts from zero.
pub fn warmup_lr(base: f64, step: u64, warmup: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * (step + 1) as f64 / warmup as f64
    }
}
