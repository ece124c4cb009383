use serde::{Deserialize, Serialize};

use super::ParamScope;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// First and second moment estimates with their step counter. A fresh state
/// is created for every training stage.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub first_moment: ModelParams<T>,
    pub second_moment: ModelParams<T>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            config,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
        })
    }

    /// One bias-corrected Adam update of every tensor in `scope`.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, scope: &ParamScope) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let step_size = T::lit(c.learning_rate / (1.0 - c.beta1.powi(t)));
        let v_correction = T::lit(1.0 / (1.0 - c.beta2.powi(t)));
        let (b1, b2, eps) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.epsilon));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);

        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first_moment.tensors_mut().into_iter().zip(self.second_moment.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            if !scope.contains(p.group) {
                continue;
            }
            for (((pv, &gv), mv), vv) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv -= step_size * *mv / ((*vv * v_correction).sqrt() + eps);
            }
            if !p.data.iter().all(|x| x.is_finite()) {
                return Err(Error::NumericalFault(format!("parameter {} after step {}", p.name, self.step)));
            }
        }
        Ok(())
    }
}
