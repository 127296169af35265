//! RMSprop: per-parameter step sizes from a running average of squared
//! gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::weights::WeightStore;

pub const DEFAULT_LEARNING_RATE: f64 = 0.001;
pub const DEFAULT_RHO: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-7;

/// RMSprop state: one squared-gradient accumulator per parameter, created
/// lazily at zero on first update.
pub struct RmsProp {
    learning_rate: f64,
    rho: f64,
    epsilon: f64,
    acc: BTreeMap<String, Vec<f64>>,
}

impl RmsProp {
    pub fn new(learning_rate: f64, rho: f64, epsilon: f64) -> Result<Self> {
        if learning_rate < 0.0 || !(0.0..1.0).contains(&rho) || epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "rmsprop wants lr >= 0, 0 <= rho < 1, eps > 0; got {learning_rate}, {rho}, {epsilon}"
            )));
        }
        Ok(RmsProp { learning_rate, rho, epsilon, acc: BTreeMap::new() })
    }

    /// One update of a named parameter in the store:
    /// `acc <- rho*acc + (1-rho)*g^2`, `param <- param - lr*g/(sqrt(acc)+eps)`.
    pub fn step(&mut self, store: &mut WeightStore, name: &str, grad: &[f64]) -> Result<()> {
        let current = store.get(name)?;
        if grad.len() != current.numel() {
            return Err(Error::Dim(format!(
                "gradient for {name:?} has {} values, parameter has {}",
                grad.len(),
                current.numel()
            )));
        }
        let acc = self
            .acc
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let mut updated = current.data().to_vec();
        for i in 0..grad.len() {
            acc[i] = self.rho * acc[i] + (1.0 - self.rho) * grad[i] * grad[i];
            updated[i] -= self.learning_rate * grad[i] / (acc[i].sqrt() + self.epsilon);
        }
        store.update(name, updated)
    }
}
