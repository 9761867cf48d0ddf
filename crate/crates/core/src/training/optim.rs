//! Adam with a stepwise learning-rate schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
    pub every_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { base: 2e-3, decay: 0.1, every_epochs: 15 }
    }
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        self.base * self.decay.powi((epoch / self.every_epochs.max(1)) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite()) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("learning rate must be positive and decay in (0, 1]"));
        }
        if self.every_epochs == 0 {
            return Err(Error::config("every_epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// First and second moments of `name`, if it has been stepped.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Applies one update to every trainable parameter from its gradient
    /// buffer. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) -> Result<()> {
        for (name, p) in store.iter() {
            if p.trainable {
                if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient {} at {name}[{i}]", p.grad[i])));
                }
            }
        }
        self.step += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                p.value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
