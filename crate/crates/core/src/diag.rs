//! Counters for flagged numerical events.
//!
//! Operations that clamp, fall back or truncate instead of failing record
//! the event here. Counters ride along with rollout tapes and gradient
//! estimates and are merged into run results; the CLI maps the
//! failure-class counters to exit code 2.

use serde::{Deserialize, Serialize};

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Cholesky factorizations that needed more than the base jitter.
    pub jitter_escalations: u64,
    /// Predictive or sampling variances clamped at the floor.
    pub variance_clamps: u64,
    /// Particles whose tape was truncated after a non-finite state.
    pub truncated_particles: u64,
    /// Backward steps where both estimator variances were zero (k_LR = 1/2).
    pub klr_conventions: u64,
    /// Importance-sampled baselines that fell back to the unweighted mean.
    pub baseline_fallbacks: u64,
    /// Gradient accumulants that went non-finite (chaotic-gradient marker).
    pub nonfinite_gradients: u64,
    /// Hyperparameter restarts that diverged and were discarded.
    pub restart_failures: u64,
}

impl Diagnostics {
    pub fn merge(&mut self, other: &Diagnostics) {
        self.jitter_escalations += other.jitter_escalations;
        self.variance_clamps += other.variance_clamps;
        self.truncated_particles += other.truncated_particles;
        self.klr_conventions += other.klr_conventions;
        self.baseline_fallbacks += other.baseline_fallbacks;
        self.nonfinite_gradients += other.nonfinite_gradients;
        self.restart_failures += other.restart_failures;
    }

    /// True when any counter that indicates a numerical failure (rather
    /// than routine conditioning work) is set.
    pub fn failed(&self) -> bool {
        self.truncated_particles > 0 || self.nonfinite_gradients > 0
    }
}
