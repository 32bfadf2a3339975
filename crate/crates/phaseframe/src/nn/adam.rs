//! Adam optimizer with bias correction.

use crate::scalar::{rl, Real};

use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One Adam update over all parameter tensors. A non-finite gradient aborts
/// the step before any parameter is touched.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    config: &AdamConfig,
) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(NnError::NonFiniteGradient(format!(
                "parameter {i} (shape {:?})",
                g.shape()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let beta1 = rl::<T>(config.beta1);
    let beta2 = rl::<T>(config.beta2);
    let one = T::one();
    let bias1 = one - beta1.powi(t);
    let bias2 = one - beta2.powi(t);
    let lr = rl::<T>(config.lr);
    let eps = rl::<T>(config.eps);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = beta1 * md[i] + (one - beta1) * gi;
            vd[i] = beta2 * vd[i] + (one - beta2) * gi * gi;
            let m_hat = md[i] / bias1;
            let v_hat = vd[i] / bias2;
            pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
