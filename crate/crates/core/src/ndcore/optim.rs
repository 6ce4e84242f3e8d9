use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::Parameters;
use super::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept flat in parameter layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar = f64> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            step: 0,
            first_moment: vec![T::zero(); num_params],
            second_moment: vec![T::zero(); num_params],
        }
    }

    /// One update. Blocks for which `trainable(name)` is false are left
    /// untouched and their moments stay at zero.
    pub fn update<P: Parameters<T>>(
        &mut self,
        params: &mut P,
        grads: &P,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let g = grads.to_flat();
        if g.len() != self.first_moment.len() || params.num_params() != g.len() {
            return Err(Error::shape(
                "Adam::update",
                (self.first_moment.len(), 1),
                (g.len(), params.num_params()),
            ));
        }
        self.step += 1;
        let b1: T = lit(self.config.beta1);
        let b2: T = lit(self.config.beta2);
        let lr: T = lit(self.config.learning_rate);
        let eps: T = lit(self.config.epsilon);
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let (m, v) = (&mut self.first_moment, &mut self.second_moment);
        let mut offset = 0;
        params.visit_mut(&mut |name, data| {
            let range = offset..offset + data.len();
            offset += data.len();
            if !trainable(name) {
                return;
            }
            for ((p, &gi), (mi, vi)) in data
                .iter_mut()
                .zip(&g[range.clone()])
                .zip(m[range.clone()].iter_mut().zip(v[range].iter_mut()))
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        Ok(())
    }
}
