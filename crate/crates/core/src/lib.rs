//! Particle-based model-based policy search.
//!
//! The library learns a Gaussian-process dynamics model from episodic trial
//! data, predicts trajectories by propagating particle batches through the
//! model, and optimizes a deterministic controller with stochastic gradient
//! estimators that stay informative even when pathwise (reparameterization)
//! gradients blow up on long nonlinear chains:
//!
//! * [`gp`] — per-dimension GP regression of state deltas with analytic
//!   input-gradients of the predictive mean and standard deviation.
//! * [`env`] — ground-truth cart-pole simulator, observation noise,
//!   saturation squashing and the exponential costs.
//! * [`policy`] — deterministic RBF-network and linear controllers with
//!   exact Jacobians.
//! * [`rollout`] — particle trajectory prediction (plain, fixed-seed and
//!   Gaussian-resampling modes) recording the full tape for backward passes.
//! * [`gradients`] — RP, model-based LR, batch-importance-weighted LR and
//!   the total-propagation estimator, plus Cholesky-factor differentiation.
//! * [`opt`] — variance-normalized SGD with momentum.
//! * [`harness`] — the episodic learning loop, value-landscape and
//!   gradient-variance diagnostics, config and result serialization.

pub mod chol;
pub mod diag;
pub mod env;
pub mod gp;
pub mod gradients;
pub mod harness;
pub mod opt;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod toy;

mod error;

pub use error::Error;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;
