//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BETA1: f32 = 0.9;
pub const DEFAULT_BETA2: f32 = 0.999;
pub const DEFAULT_EPS: f32 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    /// Fresh state for a parameter with `len` elements.
    pub fn new(len: usize, lr: f32) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }
}

/// One descent step on `param` using the gradient stored in it.
///
/// An all-zero gradient leaves the parameter values untouched (the step
/// counter and moments still advance).
pub fn adam_step(param: &mut Tensor, state: &mut AdamState) -> Result<()> {
    let grad = param
        .grad()
        .ok_or_else(|| Error::Contract("adam_step: parameter has no gradient".into()))?
        .to_vec();
    if state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::Shape(format!(
            "adam_step: state holds {} moments for {} parameters",
            state.m.len(),
            param.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let t = state.t as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let update = grad.iter().any(|&g| g != 0.0);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(&grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        if update {
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
