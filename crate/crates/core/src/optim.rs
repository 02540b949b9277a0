//! Bias-corrected Adam.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(arg_err!("learning rate must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(arg_err!("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(arg_err!("Adam eps must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    config: AdamConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    steps: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, m: Vec::new(), v: Vec::new(), steps: 0 })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Number of updates applied so far (skipped steps excluded).
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Returns `false` and leaves everything untouched if
    /// any gradient value is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>]) -> Result<bool> {
        if params.len() != grads.len() {
            return Err(arg_err!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(shape_err!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(shape_err!("parameter list changed between Adam steps"));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            warn!("non-finite gradient; Adam step {} skipped", self.steps + 1);
            return Ok(false);
        }
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let one = S::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let (lr, eps) = (S::lit(c.learning_rate), S::lit(c.eps));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(true)
    }
}
