//! Adam with bias correction, over flat parameter vectors.

use crate::error::{Error, Result};
use crate::model::{group_of, ModelGrads, ModelParams};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One Adam update on a flat parameter vector. `step` is the 1-based update
/// count used for bias correction.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    step: usize,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::validation(format!(
            "adam shapes disagree: {} params, {} grads, {} state",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if step == 0 {
        return Err(Error::validation("adam step index is 1-based"));
    }
    if let Some(idx) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::numerical(format!(
            "non-finite gradient at coordinate {idx}"
        )));
    }
    let bc1 = 1.0 - BETA1.powi(step as i32);
    let bc2 = 1.0 - BETA2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
    Ok(())
}

/// Adam update over a whole model; a non-finite gradient aborts the step
/// with the offending parameter group named.
pub fn adam_step_model(
    params: &mut ModelParams,
    grads: &ModelGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.named_mats() {
        if !g.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite gradient in parameter group `{}`",
                group_of(&name)
            )));
        }
    }
    let mut flat = params.to_flat();
    let gflat = grads.to_flat();
    state.step += 1;
    let step = state.step;
    adam_step(&mut flat, &gflat, state, step, lr)?;
    params.copy_from_flat(&flat)
}
