//! Adam optimizer with bias correction.

use super::{NnError, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> AdamParams {
        AdamParams { lr, ..Default::default() }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<A: Scalar> {
    pub m: Vec<A>,
    pub v: Vec<A>,
    pub step: u64,
}

impl<A: Scalar> AdamState<A> {
    pub fn zeros(len: usize) -> AdamState<A> {
        AdamState { m: vec![A::zero(); len], v: vec![A::zero(); len], step: 0 }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<A: Scalar>(
    weights: &mut [A],
    grads: &[A],
    state: &mut AdamState<A>,
    params: &AdamParams,
) -> Result<(), NnError> {
    if weights.len() != grads.len() || weights.len() != state.m.len() || state.m.len() != state.v.len() {
        return Err(NnError::LengthMismatch {
            weights: weights.len(),
            grads: grads.len(),
            state: state.m.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = A::cast(params.beta1);
    let b2 = A::cast(params.beta2);
    let one = A::one();
    let bias1 = one - b1.powi(t);
    let bias2 = one - b2.powi(t);
    let lr = A::cast(params.lr);
    let eps = A::cast(params.eps);
    for i in 0..weights.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        weights[i] = weights[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
