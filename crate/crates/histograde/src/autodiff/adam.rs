//! Adam with bias correction over named parameter tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::AutodiffError;
use super::tensor::Tensor;

/// Optimizer hyperparameters. The learning rate and zero weight decay
/// defaults follow the upstream training pipeline's configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates per parameter, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamParams,
    pub t: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(hyper: AdamParams) -> AdamState {
        AdamState {
            hyper,
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One Adam update over every named parameter that has a gradient.
/// Decoupled weight decay is applied when configured.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<(), AutodiffError> {
    state.t += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);

    for (name, grad) in grads {
        let param = params.get_mut(name).ok_or_else(|| {
            AutodiffError::Contract(format!("gradient for unknown parameter {name:?}"))
        })?;
        if param.shape() != grad.shape() {
            return Err(AutodiffError::Shape {
                op: "adam_step",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));

        let pd = param.data_mut();
        for i in 0..pd.len() {
            let g = grad.data()[i];
            let mi = h.beta1 * m.data()[i] + (1.0 - h.beta1) * g;
            let vi = h.beta2 * v.data()[i] + (1.0 - h.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            pd[i] -= h.lr * m_hat / (v_hat.sqrt() + h.epsilon);
            if h.weight_decay > 0.0 {
                pd[i] -= h.lr * h.weight_decay * pd[i];
            }
        }
    }
    Ok(())
}
