//! Adam restricted to a subset of the flat parameter vector.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

fn default_lr() -> f64 {
    5e-4
}
fn default_iterations() -> usize {
    1500
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_epoch() -> usize {
    36
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Iterations per reported "epoch".
    #[serde(default = "default_epoch")]
    pub epoch_length: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            iterations: default_iterations(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            epoch_length: default_epoch(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate", "must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::config("optimizer.iterations", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer.beta", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if self.epoch_length == 0 {
            return Err(Error::config("optimizer.epoch_length", "must be positive"));
        }
        Ok(())
    }
}

pub struct Adam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
    ranges: Vec<Range<usize>>,
}

impl<T: Real> Adam<T> {
    /// Only indices inside `ranges` are ever written.
    pub fn new(n_params: usize, ranges: Vec<Range<usize>>, cfg: &OptimizerConfig) -> Self {
        assert!(
            ranges.iter().all(|r| r.end <= n_params),
            "range outside parameter vector"
        );
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            t: 0,
            ranges,
        }
    }

    pub fn trainable(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::lit(self.lr / c1);
        let c2s = T::lit(c2.sqrt());
        let eps = T::lit(self.eps);
        for r in &self.ranges {
            for i in r.clone() {
                let g = grads[i];
                self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
                self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
                params[i] -= step * self.m[i] / (self.v[i].sqrt() / c2s + eps);
            }
        }
    }
}
