use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{Grads, ParamStore};
use crate::nn::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamState {
    names: Vec<String>,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            names: store.params().iter().map(|p| p.name.clone()).collect(),
            m: store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters in frozen groups and their
/// moments are left untouched.
pub fn adam_step(store: &mut ParamStore, grads: &Grads, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.names.len() != store.len() || grads.tensors.len() != store.len() {
        return Err(Error::StateMismatch(format!(
            "{} params, {} state entries, {} grads",
            store.len(),
            state.names.len(),
            grads.tensors.len()
        )));
    }
    for (i, p) in store.params().iter().enumerate() {
        if state.names[i] != p.name {
            return Err(Error::StateMismatch(format!(
                "slot {i}: state `{}` vs weight `{}`",
                state.names[i], p.name
            )));
        }
        if grads.tensors[i].shape() != p.value.shape() {
            return Err(Error::StateMismatch(format!("gradient shape for `{}`", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..store.len() {
        let group = store.params()[i].group;
        if !store.is_trainable(group) {
            continue;
        }
        let g = grads.tensors[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = store.value_mut(i).data_mut();
        for j in 0..w.len() {
            let gj = g[j] as f64;
            let mj = cfg.beta1 * m[j] as f64 + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j] as f64 + (1.0 - cfg.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = cfg.lr * (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps);
            w[j] = (w[j] as f64 - update) as f32;
        }
    }
    Ok(())
}
