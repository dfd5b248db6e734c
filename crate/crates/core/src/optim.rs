//! RMSProp.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Discounting factor of the squared-gradient average.
    pub rho: f64,
    pub epsilon: f64,
    /// Per-epoch learning-rate multiplier; 1.0 disables decay.
    pub decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.001,
            rho: 0.9,
            epsilon: 1e-7,
            decay: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("optimizer: learning_rate must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config("optimizer: rho must lie in (0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("optimizer: epsilon must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("optimizer: decay must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay.powi(epoch as i32)
    }
}

/// One elementwise RMSProp update:
/// `v <- rho v + (1 - rho) g^2`, `w <- w - lr g / (sqrt(v) + eps)`.
pub fn rmsprop_step<T: Float>(params: &mut [T], grads: &[T], state: &mut [T], learning_rate: f64, cfg: &OptimizerConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::Dimension(format!(
            "rmsprop: {} params, {} grads, {} state entries",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    let cast = |v: f64| T::from(v).expect("representable hyperparameter");
    let (rho, one_minus_rho, lr, eps) = (cast(cfg.rho), cast(1.0 - cfg.rho), cast(learning_rate), cast(cfg.epsilon));
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(state.iter_mut()) {
        *v = rho * *v + one_minus_rho * g * g;
        *w = *w - lr * g / (v.sqrt() + eps);
    }
    Ok(())
}

/// RMSProp state over a list of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub config: OptimizerConfig,
    /// Squared-gradient averages, one buffer per parameter tensor.
    pub state: Vec<Vec<f32>>,
    pub steps: usize,
}

impl RmsProp {
    pub fn new(config: OptimizerConfig, shapes: impl IntoIterator<Item = usize>) -> Self {
        RmsProp {
            config,
            state: shapes.into_iter().map(|n| vec![0.0; n]).collect(),
            steps: 0,
        }
    }

    /// Updates every tensor. Gradients are checked for non-finite values
    /// before anything is modified.
    pub fn step(&mut self, params: Vec<(String, &mut [f32])>, grads: &[&[f32]], learning_rate: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.state.len() {
            return Err(Error::Dimension(format!(
                "rmsprop: {} tensors, {} gradients, {} state buffers",
                params.len(),
                grads.len(),
                self.state.len()
            )));
        }
        for ((name, _), g) in params.iter().zip(grads) {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Training(format!("non-finite gradient {bad} in parameter {name}")));
            }
        }
        for (((_, p), g), s) in params.into_iter().zip(grads).zip(self.state.iter_mut()) {
            rmsprop_step(p, g, s, learning_rate, &self.config)?;
        }
        self.steps += 1;
        Ok(())
    }
}
