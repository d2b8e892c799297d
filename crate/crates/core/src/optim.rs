//! Gradient clipping and Adam.

use crate::config::{ClipMode, TrainConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn check_finite(grads: &[Tensor]) -> Result<()> {
    if grads.iter().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "gradient" })
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Scales every gradient by `max_norm / g` when the joint ℓ2 norm `g` exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    check_finite(grads)?;
    let g = global_norm(grads);
    if g > max_norm {
        let k = max_norm / g;
        for t in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    Ok(g)
}

/// Clips each tensor to `max_norm` independently.
pub fn clip_per_tensor(grads: &mut [Tensor], max_norm: f64) -> Result<()> {
    check_finite(grads)?;
    for t in grads.iter_mut() {
        let g = t.sq_norm().sqrt();
        if g > max_norm {
            let k = max_norm / g;
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    Ok(())
}

pub fn clip(grads: &mut [Tensor], max_norm: f64, mode: ClipMode) -> Result<()> {
    match mode {
        ClipMode::Global => clip_global_norm(grads, max_norm).map(|_| ()),
        ClipMode::PerTensor => clip_per_tensor(grads, max_norm),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(t: &TrainConfig) -> Self {
        AdamConfig {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update. Frozen parameters are skipped entirely; masked
    /// entries are zeroed again afterwards.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::dim(
                "adam",
                format!(
                    "{} grads, {} moments for {} params",
                    grads.len(),
                    self.m.len(),
                    store.len()
                ),
            ));
        }
        check_finite(grads)?;
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if store.param(id).frozen {
                continue;
            }
            let g = grads[i].data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let mut value = store.get(id).clone();
            for (k, x) in value.data_mut().iter_mut().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "adam update" });
            }
            store.set(id, value)?;
        }
        Ok(())
    }
}
