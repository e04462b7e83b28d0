//! Parameter updates: Adam with bias correction, plain SGD, and global
//! gradient-norm clipping.
//!
//! Both steppers consume the gradients accumulated in the store and zero
//! them afterwards, so a training loop is: accumulate per-example grads,
//! scale to a batch mean, clip, step. A non-finite gradient aborts the
//! step before any parameter moves.

use crate::error::{Error, Result};
use crate::store::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value().shape()))
                .collect(),
            v: store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value().shape()))
                .collect(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam step over every parameter; gradients are
/// zeroed afterwards. Errors (leaving parameters untouched) if any
/// gradient is non-finite or the store layout changed since `state` was
/// created.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::invalid(
            "adam_step",
            format!(
                "state tracks {} parameters, store has {}",
                state.m.len(),
                store.len()
            ),
        ));
    }
    store.grads_finite()?;
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for (i, entry) in store.entries_mut().iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let grads = entry.grad().data().to_vec();
        let w = entry.value_mut().data_mut();
        for j in 0..grads.len() {
            let g = grads[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            w[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    store.zero_grads();
    Ok(())
}

/// Plain gradient descent step; gradients are zeroed afterwards.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    store.grads_finite()?;
    for entry in store.entries_mut() {
        let grads = entry.grad().data().to_vec();
        let w = entry.value_mut().data_mut();
        for (wj, g) in w.iter_mut().zip(grads) {
            *wj -= lr * g;
        }
    }
    store.zero_grads();
    Ok(())
}

/// Rescale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the scale factor applied (1.0 when no clipping happened).
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::invalid(
            "clip_global_norm",
            format!("max_norm must be positive, got {max_norm}"),
        ));
    }
    store.grads_finite()?;
    let norm = store.grad_global_norm();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    store.scale_grads(scale);
    Ok(scale)
}
