//! ADAM with bias correction.

use serde::{Deserialize, Serialize};

use super::params::{GradBuffer, ParamKind, ParamStore};
use super::tensor::{Real, Tensor};
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments for every entry of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.value.shape().to_vec())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One update of every trainable entry. Fails without touching anything if
/// any gradient is non-finite.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &GradBuffer<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), NumericsError> {
    if state.m.len() != store.len() {
        return Err(NumericsError::Shape {
            op: "adam",
            detail: format!("state has {} slots for {} parameters", state.m.len(), store.len()),
        });
    }
    for id in store.ids() {
        if store.entry(id).kind == ParamKind::Trainable && !grads.get(id).is_finite() {
            return Err(NumericsError::NonFinite { op: "adam", detail: format!("gradient of {}", store.entry(id).name) });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of_f64(cfg.beta1), T::of_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::of_f64(1.0 - cfg.beta1), T::of_f64(1.0 - cfg.beta2));
    let (c1, c2) = (T::of_f64(c1), T::of_f64(c2));
    let lr = T::of_f64(lr);
    let eps = T::of_f64(cfg.eps);
    for id in store.ids() {
        if store.entry(id).kind != ParamKind::Trainable {
            continue;
        }
        let g = grads.get(id).data();
        let m = state.m[id.index()].data_mut();
        let v = state.v[id.index()].data_mut();
        let p = store.value_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
