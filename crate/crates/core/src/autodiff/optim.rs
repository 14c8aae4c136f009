use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// SGD with momentum, coupled weight decay and a step learning-rate decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier applied to the learning rate every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_decay: 0.1,
            decay_every: 20,
            epochs: 50,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Euclidean norm of the gradients of `ids`, taken jointly.
pub fn grad_norm(store: &ParamStore, ids: &[ParamId]) -> f64 {
    ids.iter()
        .flat_map(|&id| store.grad(id).data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales the gradients of `ids` so their joint norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = grad_norm(store, ids);
    if norm > max_norm && norm.is_finite() {
        let c = max_norm / norm;
        for &id in ids {
            let (_, grad, _) = store.value_grad_velocity_mut(id);
            for g in grad.data_mut() {
                *g *= c;
            }
        }
    }
    norm
}

/// One update over every parameter in the store.
pub fn sgd_step(store: &mut ParamStore, cfg: &OptimizerConfig, epoch: usize) -> Result<()> {
    let ids: Vec<ParamId> = store.ids().collect();
    sgd_step_on(store, &ids, cfg, epoch)
}

/// One update restricted to `ids`:
/// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
///
/// Gradients of all listed parameters are checked before anything is
/// modified; a non-finite entry aborts the step and names the parameter.
/// Gradients of the listed parameters are zeroed afterwards.
pub fn sgd_step_on(
    store: &mut ParamStore,
    ids: &[ParamId],
    cfg: &OptimizerConfig,
    epoch: usize,
) -> Result<()> {
    for &id in ids {
        if !store.grad(id).is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {}",
                store.name(id)
            )));
        }
    }
    let lr = cfg.lr_at(epoch);
    for &id in ids {
        let (value, grad, velocity) = store.value_grad_velocity_mut(id);
        for ((p, g), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data_mut().iter_mut())
            .zip(velocity.data_mut().iter_mut())
        {
            *v = cfg.momentum * *v + *g + cfg.weight_decay * *p;
            *p -= lr * *v;
            *g = 0.0;
        }
    }
    Ok(())
}
