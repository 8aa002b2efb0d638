//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub config: AdamConfig,
}

impl<T: Element> AdamState<T> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState { m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0, config }
    }

    pub fn for_param(param: &Tensor<T>) -> Self {
        Self::new(param.len(), AdamConfig::default())
    }
}

/// Applies one Adam update to `param` using (and consuming) its gradient.
pub fn adam_step<T: Element>(param: &mut Tensor<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::Contract(format!(
            "adam state tracks {} elements but parameter has {}",
            state.m.len(),
            param.len()
        )));
    }
    let grad = param
        .take_grad()
        .ok_or_else(|| Error::Contract("adam_step called on a parameter without a gradient".into()))?;
    state.t += 1;
    let AdamConfig { beta1, beta2, epsilon } = state.config;
    let t = state.t as i32;
    let step = lr / (1.0 - beta1.powi(t));
    let v_correction = 1.0 / (1.0 - beta2.powi(t));
    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let step = T::from_f64_lossy(step);
    let v_correction = T::from_f64_lossy(v_correction);
    let eps = T::from_f64_lossy(epsilon);

    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(&grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        *p = *p - step * *m / ((*v * v_correction).sqrt() + eps);
    }
    Ok(())
}
