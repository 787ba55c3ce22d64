use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor with its gradient slot and Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Element = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
    /// Frozen parameters are skipped by the optimizer and by gradient checks.
    pub frozen: bool,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
            step_count: 0,
            frozen: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Clears optimizer state so training restarts from the current value.
    pub fn reset_optimizer(&mut self) {
        self.adam_m.fill(T::zero());
        self.adam_v.fill(T::zero());
        self.step_count = 0;
    }

    pub fn cast<U: Element>(&self) -> Parameter<U> {
        Parameter {
            name: self.name.clone(),
            value: self.value.cast(),
            grad: self.grad.cast(),
            adam_m: self.adam_m.cast(),
            adam_v: self.adam_v.cast(),
            step_count: self.step_count,
            frozen: self.frozen,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. The gradient is left in place; callers
/// zero it before the next accumulation.
pub fn adam_step<T: Element>(param: &mut Parameter<T>, hyper: &AdamHyper) -> Result<()> {
    if !param.grad.all_finite() {
        return Err(Error::NonFiniteGrad {
            name: param.name.clone(),
            max_abs: param.grad.max_abs().as_f64() as f32,
        });
    }
    param.step_count += 1;
    let t = param.step_count as i32;
    let correction1 = 1.0 - hyper.beta1.powi(t);
    let correction2 = 1.0 - hyper.beta2.powi(t);
    let value = param.value.data_mut();
    let m = param.adam_m.data_mut();
    let v = param.adam_v.data_mut();
    for (((w, m), v), g) in value.iter_mut().zip(m).zip(v).zip(param.grad.data()) {
        let g = g.as_f64();
        let m_new = hyper.beta1 * m.as_f64() + (1.0 - hyper.beta1) * g;
        let v_new = hyper.beta2 * v.as_f64() + (1.0 - hyper.beta2) * g * g;
        *m = T::of(m_new);
        *v = T::of(v_new);
        let m_hat = m_new / correction1;
        let v_hat = v_new / correction2;
        *w = T::of(w.as_f64() - hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps));
    }
    Ok(())
}
