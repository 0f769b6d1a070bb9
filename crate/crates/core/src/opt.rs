//! Variance-normalized stochastic gradient descent with momentum.
//!
//! Each coordinate's step is normalized by `√(E[g]² + V[g])`, with `V[g]`
//! the variance of the mean gradient estimated from the particle batch:
//!
//! ```text
//! m ← γ m + g / √(g² + v + δ)
//! θ ← θ − α m
//! ```
//!
//! so noisy coordinates take small steps and clean ones step at full rate.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::gradients::GradEstimate;

/// Numeric floor inside the square root; prevents 0/0 at exactly-zero
/// gradients.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig { learning_rate: 5e-4, momentum: 0.9 }
    }
}

/// Optimizer state across steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub momentum_buf: Vec<f64>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: u64,
}

impl OptState {
    pub fn new(dim: usize, cfg: &OptConfig) -> Self {
        assert!(cfg.learning_rate > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&cfg.momentum), "momentum must be in [0, 1)");
        OptState {
            momentum_buf: vec![0.0; dim],
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            steps: 0,
        }
    }

    /// One update; returns the new parameter vector.
    pub fn step(&mut self, theta: &DVector<f64>, est: &GradEstimate) -> DVector<f64> {
        assert_eq!(theta.len(), self.momentum_buf.len(), "parameter dimension mismatch");
        assert_eq!(est.grad.len(), theta.len(), "gradient dimension mismatch");
        let mut next = theta.clone();
        for c in 0..theta.len() {
            let g = est.grad[c];
            let v = est.var_of_mean[c].max(0.0);
            let incr = if g.is_finite() && v.is_finite() {
                g / (g * g + v + NORM_FLOOR).sqrt()
            } else {
                0.0 // skip coordinates whose estimate blew up
            };
            self.momentum_buf[c] = self.momentum * self.momentum_buf[c] + incr;
            next[c] -= self.learning_rate * self.momentum_buf[c];
        }
        self.steps += 1;
        next
    }
}
