use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stochastic gradient descent hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
///
/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`. Velocity buffers are keyed by
/// parameter name and created on first use.
#[derive(Debug, Clone)]
pub struct Sgd<S> {
    cfg: SgdConfig,
    velocity: HashMap<String, Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: HashMap::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    /// Updates the given parameters and zeroes their gradients. Every
    /// tensor passed in must carry a gradient buffer.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<S>)>,
    {
        let lr = S::of(self.cfg.learning_rate);
        let mu = S::of(self.cfg.momentum);
        let wd = S::of(self.cfg.weight_decay);
        for (name, t) in params {
            let n = t.len();
            let (data, grad) = t.parts_mut();
            let Some(grad) = grad else {
                return Err(Error::Contract(format!("parameter {name} has no gradient")));
            };
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![S::zero(); n]);
            if v.len() != n {
                return Err(Error::dim("sgd_step", &[v.len()], &[n]));
            }
            for ((p, g), vel) in data.iter_mut().zip(grad.iter_mut()).zip(v.iter_mut()) {
                *vel = mu * *vel + *g + wd * *p;
                *p -= lr * *vel;
                *g = S::zero();
            }
        }
        Ok(())
    }

    /// Steps every trainable tensor of the given stores.
    pub fn step_trainable(&mut self, stores: &mut [&mut ParamStore<S>]) -> Result<()> {
        for store in stores.iter_mut() {
            self.step(store.iter_mut().filter(|(_, t)| t.requires_grad()))?;
        }
        Ok(())
    }
}
