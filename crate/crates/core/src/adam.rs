//! Adam optimizer with bias correction and no learning-rate decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Per-parameter-vector Adam state. `t` increments by exactly one per step.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update over a store's flat vector. `grads` must cover every
/// parameter (same flat layout as the store).
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "gradient length {} does not cover the {} parameters",
            grads.len(),
            params.len()
        )));
    }
    if state.m.len() != params.len() {
        return Err(Error::Contract("Adam state length does not match parameters".into()));
    }
    state.t += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let data = params.flat_mut();
    for i in 0..data.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}
