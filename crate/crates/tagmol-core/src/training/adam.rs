use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::diffcore::Tensor;

pub const ADAM_EPSILON: f64 = 1e-8;

/// First/second moment estimates for one parameter group, aligned by
/// position with the group's tensor list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn for_tensors(tensors: &[(String, &Tensor)]) -> Self {
        let zeros: Vec<Tensor> = tensors.iter().map(|(_, t)| Tensor::zeros(t.shape.clone())).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One Adam update with bias correction over a parameter group.
/// Deterministic; a non-finite gradient is reported instead of applied so
/// the caller can run its divergence handling.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    lr: f64,
    beta1: f64,
    beta2: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Config(format!(
            "adam group size mismatch: {} params, {} grads, {} states",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (index, g) in grads.iter().enumerate() {
        if g.shape != params[index].shape {
            return Err(TrainError::Config(format!(
                "adam gradient {} has shape {:?}, parameter has {:?}",
                index, g.shape, params[index].shape
            )));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient { index });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - beta1.powf(t);
    let bias2 = 1.0 - beta2.powf(t);
    for (index, param) in params.iter_mut().enumerate() {
        let g = &grads[index];
        let m = &mut state.m[index];
        let v = &mut state.v[index];
        for k in 0..g.values.len() {
            let gk = g.values[k];
            m.values[k] = beta1 * m.values[k] + (1.0 - beta1) * gk;
            v.values[k] = beta2 * v.values[k] + (1.0 - beta2) * gk * gk;
            let m_hat = m.values[k] / bias1;
            let v_hat = v.values[k] / bias2;
            param.values[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}

/// The two-level learning-rate schedule: `lr_initial` below the switch
/// epoch, `lr_after` at and beyond it.
pub fn lr_at_epoch(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.lr_switch_epoch {
        config.lr_initial
    } else {
        config.lr_after
    }
}
