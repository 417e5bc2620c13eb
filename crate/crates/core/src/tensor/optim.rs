//! Adam with bias correction.

use crate::Real;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

/// First/second moment estimates and the number of steps taken.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<Real>,
    pub v: Vec<Real>,
    pub step: u64,
}

/// One Adam update of `params` in place. Moments start at zero when empty.
pub fn adam_step(
    params: &mut [Real],
    grads: &[Real],
    state: &mut AdamMoments,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.is_empty() && state.v.is_empty() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    }
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::shape(
            "adam_step",
            format!(
                "params {}, grads {}, m {}, v {}",
                params.len(),
                grads.len(),
                state.m.len(),
                state.v.len()
            ),
        ));
    }
    state.step += 1;
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let (lr, eps) = (cfg.lr as f64, cfg.eps as f64);
    for i in 0..params.len() {
        let g = grads[i] as f64;
        let m = b1 * state.m[i] as f64 + (1.0 - b1) * g;
        let v = b2 * state.v[i] as f64 + (1.0 - b2) * g * g;
        state.m[i] = m as Real;
        state.v[i] = v as Real;
        let update = lr * (m / c1) / ((v / c2).sqrt() + eps);
        params[i] = (params[i] as f64 - update) as Real;
    }
    Ok(())
}

/// Adam over every parameter of a [`ParamStore`], keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub moments: BTreeMap<String, AdamMoments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
        }
    }

    /// Applies the store's accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (name, p) in store.iter_mut() {
            let state = self.moments.entry(name.to_string()).or_default();
            adam_step(p.value.data_mut(), &p.grad, state, &self.config)?;
        }
        store.zero_grad();
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.moments.values().map(|m| m.step).max().unwrap_or(0)
    }
}
