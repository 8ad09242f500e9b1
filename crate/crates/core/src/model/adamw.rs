use serde::{Deserialize, Serialize};

use super::DenoiserParams;
use crate::error::{check_dim, Error, Result};

/// Adaptive-moment optimizer state with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    /// In-place update of `theta`.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        check_dim(self.first_moment.len(), theta.len())?;
        check_dim(theta.len(), grad.len())?;
        self.step_count += 1;
        let n = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(n);
        let bc2 = 1.0 - self.beta2.powi(n);
        for (((x, g), m), v) in theta
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *x -= self.lr * self.weight_decay * *x;
            *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Functional form: returns the updated parameters and optimizer state.
pub fn optimizer_step(
    p: &DenoiserParams,
    grad: &[f64],
    st: &OptimizerState,
) -> Result<(DenoiserParams, OptimizerState)> {
    let mut p = p.clone();
    let mut st = st.clone();
    st.step(p.theta_mut(), grad)?;
    Ok((p, st))
}

/// Learning rate scaled inversely with the preference strength: `(2000 / beta) * base_lr`.
pub fn scaled_lr(base_lr: f64, beta: f64) -> f64 {
    2000.0 / beta * base_lr
}
