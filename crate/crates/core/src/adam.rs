//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every tensor of one [`ParameterStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParameterStore<T>) -> Self {
        let zeros = |(name, t): (&str, &crate::tensor::Tensor<T>)| {
            (name.to_string(), vec![T::zero(); t.len()])
        };
        Self {
            config,
            step: 0,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// One Adam update of every tensor in `store`, then zeroes the gradients.
///
/// Every tensor must carry a gradient (absorbed from a tape).
pub fn adam_step<T: Scalar>(store: &mut ParameterStore<T>, state: &mut AdamState<T>) -> Result<()> {
    if let Some(name) = store.iter().find(|(_, t)| t.grad.is_none()).map(|(n, _)| n) {
        return Err(Error::Usage(format!("adam_step: `{name}` has no gradient")));
    }
    state.step += 1;
    let c = state.config;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let bc1 = T::one() - T::of(c.beta1.powi(state.step as i32));
    let bc2 = T::one() - T::of(c.beta2.powi(state.step as i32));
    let (lr, eps) = (T::of(c.lr), T::of(c.eps));

    for (name, tensor) in store.iter_mut() {
        let (Some(m), Some(v)) = (state.m.get_mut(name), state.v.get_mut(name)) else {
            return Err(Error::Usage(format!("adam_step: no optimizer state for `{name}`")));
        };
        let grad = tensor.grad.take().expect("checked above");
        for (((p, &g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        tensor.grad = Some(vec![T::zero(); grad.len()]);
    }
    Ok(())
}
