//! Adaptive-moment optimizer with per-parameter step counts.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_mismatch, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one parameter, and how many updates it has seen.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    moments: Vec<Moments>,
}

impl Adam {
    /// Zeroed moments shaped like every storage of `store`.
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let moments = store
            .ids()
            .map(|id| {
                let n = store.get(id).numel();
                Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                }
            })
            .collect();
        Self { config, moments }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn set_config(&mut self, config: AdamConfig) {
        self.config = config;
    }

    pub fn moments(&self, id: ParamId) -> &Moments {
        &self.moments[id.index()]
    }

    pub fn set_moments(&mut self, id: ParamId, moments: Moments) -> Result<()> {
        let slot = &mut self.moments[id.index()];
        if moments.m.len() != slot.m.len() || moments.v.len() != slot.v.len() {
            return Err(shape_mismatch(
                slot.m.len(),
                (moments.m.len(), moments.v.len()),
            ));
        }
        *slot = moments;
        Ok(())
    }

    /// Applies one bias-corrected update to every parameter in `grads`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<ParamId, Tensor>,
    ) -> Result<()> {
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        for (&id, grad) in grads {
            let param = store.get_mut(id);
            if param.shape() != grad.shape() {
                return Err(shape_mismatch(param.shape(), grad.shape()));
            }
            let mo = &mut self.moments[id.index()];
            mo.t += 1;
            let c1 = 1.0 - libm::pow(b1, mo.t as f64);
            let c2 = 1.0 - libm::pow(b2, mo.t as f64);
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(&mut mo.m)
                .zip(&mut mo.v)
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}
