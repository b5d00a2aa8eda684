//! Bias-corrected Adam.
//!
//! For every parameter `w` with gradient `g` at step `t` (counting from 1):
//!
//! ```text
//! m = beta1 * m + (1 - beta1) * g
//! v = beta2 * v + (1 - beta2) * g^2
//! w -= lr * (m / (1 - beta1^t)) / (sqrt(v / (1 - beta2^t)) + epsilon)
//! ```

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: ParamStore,
    pub second_moment: ParamStore,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        AdamState {
            config,
            step_count: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }
}

/// Applies one Adam update to every parameter. A parameter without an entry
/// in `grads` is treated as having a zero gradient.
///
/// All gradients are validated before anything is modified, so a rejected
/// step leaves `params` and `state` untouched.
pub fn adam_step(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("`{name}`: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                symbol: format!("gradient of {name}"),
            });
        }
    }
    for (name, p) in params.iter() {
        let m = state.first_moment.get(name)?;
        if m.shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("`{name}`: moment {:?} for parameter {:?}", m.shape(), p.shape()),
            ));
        }
    }

    state.step_count += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - (beta1 as f64).powi(t);
    let bc2 = 1.0 - (beta2 as f64).powi(t);

    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let zero;
        let g = match grads.get(&name) {
            Ok(g) => g,
            Err(_) => {
                zero = Tensor::zeros(params.get(&name)?.shape());
                &zero
            }
        };
        let m = state.first_moment.get_mut(&name)?;
        for (m, &g) in m.data_mut().iter_mut().zip(g.data()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
        }
        let v = state.second_moment.get_mut(&name)?;
        for (v, &g) in v.data_mut().iter_mut().zip(g.data()) {
            *v = beta2 * *v + (1.0 - beta2) * g * g;
        }
        let m = state.first_moment.get(&name)?.data().to_vec();
        let v = state.second_moment.get(&name)?.data().to_vec();
        let p = params.get_mut(&name)?;
        for ((w, m), v) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = m as f64 / bc1;
            let v_hat = v as f64 / bc2;
            *w -= (lr as f64 * m_hat / (v_hat.sqrt() + epsilon as f64)) as f32;
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f32) -> f32 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
    norm
}
