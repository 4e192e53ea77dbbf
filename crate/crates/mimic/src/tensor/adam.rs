//! Bias-corrected Adam.

use super::Tensor;
use crate::error::{Error, Result};

/// Per-parameter first/second moment accumulators and the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    /// Zero-initialized state for the given parameter list (t = 0).
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.shape().numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.shape().numel()]).collect(),
            t: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.t
    }
}

/// One Adam update over `params`, reading each tensor's grad slot.
/// Parameters with an absent gradient are treated as having zero gradient.
pub fn adam_update(
    params: &mut [Tensor],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::shape("params", state.m.len(), params.len(), "adam_update state"));
    }
    if lr <= 0.0 {
        return Err(Error::invalid(format!("adam lr must be positive, got {lr}")));
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let n = p.shape().numel();
        if state.m[i].len() != n {
            return Err(Error::shape("numel", state.m[i].len(), n, format!("adam_update param {i}")));
        }
        let Some(grad) = p.grad() else { continue };
        let grad = grad.to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, val) in p.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *val -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
