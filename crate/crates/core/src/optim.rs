use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, created lazily per parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(id.0)?
            .as_ref()
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// Scales all gradient groups in place so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(groups: &mut [&mut Vec<(ParamId, Vec<T>)>], max_norm: f64) -> f64 {
    let norm = groups
        .iter()
        .flat_map(|g| g.iter())
        .flat_map(|(_, g)| g.iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::c(max_norm / norm);
        for v in groups.iter_mut().flat_map(|g| g.iter_mut()).flat_map(|(_, g)| g.iter_mut()) {
            *v *= s;
        }
    }
    norm
}

/// One bias-corrected Adam update. Parameters without a gradient entry keep
/// their values; their moments are left untouched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[(ParamId, Vec<T>)],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    state.step += 1;
    if state.moments.len() < params.len() {
        state.moments.resize(params.len(), None);
    }
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (id, g) in grads {
        let p = params.get_mut(*id);
        if !p.trainable {
            continue;
        }
        let n = p.value.numel();
        if g.len() != n {
            return Err(Error::Contract(format!(
                "gradient for `{}` has {} elements, parameter has {n}",
                p.name,
                g.len()
            )));
        }
        let (m, v) = state.moments[id.0].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        if m.len() != n {
            return Err(Error::Contract(format!("moment buffer shape changed for `{}`", p.name)));
        }
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi.f64();
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let update = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
            *w = T::c(w.f64() - update);
        }
    }
    Ok(())
}
