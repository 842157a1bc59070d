use serde::{Deserialize, Serialize};

use super::{Scalar, TensorBuf};
use crate::error::{Error, Result};

/// Momentum SGD constants with a step learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConstants {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
}

impl Default for OptimConstants {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            decay_factor: 0.1,
            decay_every: 100_000,
        }
    }
}

impl OptimConstants {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.momentum >= 0.0
            && self.weight_decay >= 0.0
            && self.decay_factor > 0.0
            && self.decay_every > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer constants {self:?}"
            )))
        }
    }

    /// `base_lr * decay_factor ^ floor(iter / decay_every)`.
    pub fn lr(&self, iter: u64) -> f64 {
        self.base_lr * self.decay_factor.powi((iter / self.decay_every) as i32)
    }
}

/// Optimizer constants plus one velocity buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub constants: OptimConstants,
    velocity: Vec<TensorBuf<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(constants: OptimConstants, params: &[TensorBuf<T>]) -> Result<Self> {
        constants.validate()?;
        Ok(Self {
            constants,
            velocity: params.iter().map(|p| TensorBuf::zeros(p.shape())).collect(),
        })
    }

    pub fn with_velocity(constants: OptimConstants, velocity: Vec<TensorBuf<T>>) -> Result<Self> {
        constants.validate()?;
        Ok(Self {
            constants,
            velocity,
        })
    }

    pub fn velocity(&self) -> &[TensorBuf<T>] {
        &self.velocity
    }

    pub fn lr(&self, iter: u64) -> f64 {
        self.constants.lr(iter)
    }

    /// `v <- momentum*v - lr*(grad + weight_decay*param); param <- param + v`.
    /// Refuses to touch anything if a gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut [TensorBuf<T>],
        grads: &[TensorBuf<T>],
        iter: u64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::Config(
                "parameter, gradient and velocity counts differ".into(),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Config(format!(
                    "gradient {i} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(i));
            }
        }
        let lr = T::lit(self.lr(iter));
        let mu = T::lit(self.constants.momentum);
        let wd = T::lit(self.constants.weight_decay);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv - lr * (gv + wd * *pv);
                *pv = *pv + *vv;
            }
        }
        Ok(())
    }
}
