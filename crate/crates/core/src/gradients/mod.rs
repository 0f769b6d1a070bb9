//! Gradient estimators over a rollout tape.
//!
//! All estimators differentiate the expected return through the per-step
//! Gaussian parameters `ζ = (μ, σ)` of the sampled transitions:
//!
//! * [`rp_gradient`] — pathwise (reparameterization) gradients via a
//!   reverse pass using `dx/dμ = I`, `dx/dσ = diag(ε)`;
//! * [`gr_rp_gradient`] — the same through Gaussian-resampling tapes,
//!   differentiating the batch refit through the Cholesky factor;
//! * [`lr_gradient`] — model-based likelihood-ratio gradients with
//!   leave-one-out baselines, optionally batch-importance-weighted;
//! * [`total_propagation`] — a single backward pass fusing the LR and RP
//!   contributions per step by inverse-variance weighting.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diag::Diagnostics;
use crate::rollout::{Controller, CostFunction, DynamicsModel, RolloutMode, TrajectoryRecord};

mod lr;
mod rp;
mod tp;

pub use lr::{baseline_biw, lr_gradient, lr_step_terms, StepLrTerms};
pub use rp::{gr_rp_gradient, rp_gradient};
pub use tp::total_propagation;

/// Which estimator produced a gradient; string forms match the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    Rp,
    RpFixedSeed,
    Gr,
    GrFixedSeed,
    Lr,
    BiwLr,
    Tp,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 7] = [
        EstimatorKind::Rp,
        EstimatorKind::RpFixedSeed,
        EstimatorKind::Gr,
        EstimatorKind::GrFixedSeed,
        EstimatorKind::Lr,
        EstimatorKind::BiwLr,
        EstimatorKind::Tp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Rp => "rp",
            EstimatorKind::RpFixedSeed => "rp_fs",
            EstimatorKind::Gr => "gr",
            EstimatorKind::GrFixedSeed => "gr_fs",
            EstimatorKind::Lr => "lr",
            EstimatorKind::BiwLr => "biw-lr",
            EstimatorKind::Tp => "tp",
        }
    }

    /// Rollout mode this estimator's tapes must come from.
    pub fn rollout_mode(&self) -> RolloutMode {
        match self {
            EstimatorKind::Gr | EstimatorKind::GrFixedSeed => RolloutMode::GaussianResample,
            EstimatorKind::RpFixedSeed => RolloutMode::FixedSeed,
            _ => RolloutMode::Plain,
        }
    }

    /// Whether the optimizer should hold the rollout seed fixed (PEGASUS).
    pub fn fixed_seed(&self) -> bool {
        matches!(self, EstimatorKind::RpFixedSeed | EstimatorKind::GrFixedSeed)
    }

    /// Run this estimator on a tape.
    pub fn estimate(
        &self,
        model: &dyn DynamicsModel,
        controller: &dyn Controller,
        cost: &dyn CostFunction,
        tape: &TrajectoryRecord,
    ) -> GradEstimate {
        match self {
            EstimatorKind::Rp | EstimatorKind::RpFixedSeed => {
                rp_gradient(model, controller, cost, tape)
            }
            EstimatorKind::Gr | EstimatorKind::GrFixedSeed => {
                gr_rp_gradient(model, controller, cost, tape)
            }
            EstimatorKind::Lr => lr_gradient(model, controller, tape, false),
            EstimatorKind::BiwLr => lr_gradient(model, controller, tape, true),
            EstimatorKind::Tp => total_propagation(model, controller, cost, tape, true),
        }
    }
}

impl FromStr for EstimatorKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EstimatorKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown estimator '{s}'")))
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A gradient estimate over the policy parameters.
#[derive(Debug, Clone)]
pub struct GradEstimate {
    /// Mean gradient over particles.
    pub grad: DVector<f64>,
    /// Per-coordinate sample variance of the mean (variance / P).
    pub var_of_mean: DVector<f64>,
    /// Per-particle gradient rows (P×|θ|) the mean and variance come from.
    pub per_particle: DMatrix<f64>,
    pub estimator: EstimatorKind,
    /// Per-step inverse-variance weights, total propagation only, in
    /// forward step order.
    pub klr_trace: Option<Vec<f64>>,
    pub diag: Diagnostics,
}

impl GradEstimate {
    /// Projection of the estimate onto a direction, with the standard
    /// error of the projected mean.
    pub fn project(&self, dir: &DVector<f64>) -> (f64, f64) {
        let p = self.per_particle.nrows();
        let proj: Vec<f64> =
            (0..p).map(|i| self.per_particle.row(i).transpose().dot(dir)).collect();
        let mean = proj.iter().sum::<f64>() / p as f64;
        if p < 2 {
            return (mean, 0.0);
        }
        let var = proj.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (p as f64 - 1.0);
        (mean, (var / p as f64).sqrt())
    }

    /// Trace of the per-coordinate variance of the mean.
    pub fn trace_var(&self) -> f64 {
        self.var_of_mean.iter().sum()
    }
}

/// Fold per-particle rows into mean, variance-of-the-mean and flags.
pub(crate) fn finalize(
    rows: Vec<DVector<f64>>,
    estimator: EstimatorKind,
    klr_trace: Option<Vec<f64>>,
    mut diag: Diagnostics,
) -> GradEstimate {
    let p = rows.len();
    let n = rows[0].len();
    let mut per_particle = DMatrix::zeros(p, n);
    let mut bad = false;
    for (i, row) in rows.iter().enumerate() {
        for c in 0..n {
            per_particle[(i, c)] = row[c];
            if !row[c].is_finite() {
                bad = true;
            }
        }
    }
    if bad {
        diag.nonfinite_gradients += 1;
    }
    let mut grad = DVector::zeros(n);
    for row in &rows {
        grad += row;
    }
    grad /= p as f64;
    let var_of_mean = if bad {
        DVector::from_element(n, f64::INFINITY)
    } else if p < 2 {
        DVector::zeros(n)
    } else {
        DVector::from_fn(n, |c, _| {
            let m = grad[c];
            let v = (0..p).map(|i| (per_particle[(i, c)] - m).powi(2)).sum::<f64>()
                / (p as f64 - 1.0);
            v / p as f64
        })
    };
    GradEstimate { grad, var_of_mean, per_particle, estimator, klr_trace, diag }
}

/// Everything needed to push adjoints through one recorded transition:
/// the ζ Jacobians (with the variance-mode chain applied) and the
/// controller Jacobians at the propagation source.
pub(crate) struct StepJac {
    pub dmu_dx: DMatrix<f64>,
    pub dmu_du: DMatrix<f64>,
    pub dstd_dx: DMatrix<f64>,
    pub dstd_du: DMatrix<f64>,
    pub du_dx: DMatrix<f64>,
    pub du_dtheta: DMatrix<f64>,
}

impl StepJac {
    /// Adjoint of the action from ζ adjoints: `dζ/du`ᵀ applied to (μ̄, σ̄).
    pub fn ubar(&self, mu_bar: &DVector<f64>, sd_bar: &DVector<f64>) -> DVector<f64> {
        self.dmu_du.tr_mul(mu_bar) + self.dstd_du.tr_mul(sd_bar)
    }

    /// θ-space projection `(μ̄ᵀ dμ/du + σ̄ᵀ dσ/du) du/dθ`.
    pub fn theta_grad(&self, mu_bar: &DVector<f64>, sd_bar: &DVector<f64>) -> DVector<f64> {
        self.du_dtheta.tr_mul(&self.ubar(mu_bar, sd_bar))
    }

    /// Source-state adjoint including the controller chain.
    pub fn xbar(&self, mu_bar: &DVector<f64>, sd_bar: &DVector<f64>) -> DVector<f64> {
        self.dmu_dx.tr_mul(mu_bar)
            + self.dstd_dx.tr_mul(sd_bar)
            + self.du_dx.tr_mul(&self.ubar(mu_bar, sd_bar))
    }
}

/// Recompute the Jacobians of transition `t` for particle `i` from the
/// tape (forward values are bit-reproducible, so nothing extra needs to
/// be stored).
pub(crate) fn step_jacobians(
    model: &dyn DynamicsModel,
    controller: &dyn Controller,
    tape: &TrajectoryRecord,
    t: usize,
    i: usize,
) -> StepJac {
    let d = model.state_dim();
    let f = model.action_dim();
    let src = tape.source_states(t);
    let x = DVector::from_iterator(d, src.row(i).iter().copied());
    let u = DVector::from_iterator(f, tape.actions[t].row(i).iter().copied());
    let (dp, jac) = model.predict_with_grads(&x, &u);
    let mut scratch = Diagnostics::default();
    let (_, dstd_dx, dstd_du) = tape.cfg.effective_std_grads(&dp, &jac, &mut scratch);
    let cj = controller.jacobians(&x);
    StepJac {
        dmu_dx: jac.dmean_dx,
        dmu_du: jac.dmean_du,
        dstd_dx,
        dstd_du,
        du_dx: cj.du_dx,
        du_dtheta: cj.du_dtheta,
    }
}

/// Inverse-variance weight `k_LR = 1/(1 + σ²_LR/σ²_RP)` with the
/// degenerate-case conventions.
pub(crate) fn klr_weight(var_lr: f64, var_rp: f64, diag: &mut Diagnostics) -> f64 {
    if var_lr == 0.0 && var_rp == 0.0 {
        diag.klr_conventions += 1;
        return 0.5;
    }
    if var_lr.is_nan() || var_rp.is_nan() {
        diag.klr_conventions += 1;
        diag.nonfinite_gradients += 1;
        return 0.5;
    }
    if var_rp.is_infinite() {
        return if var_lr.is_infinite() {
            diag.klr_conventions += 1;
            0.5
        } else {
            1.0
        };
    }
    1.0 / (1.0 + var_lr / var_rp)
}

/// Trace of the per-coordinate sample variance over particle rows,
/// divided by the particle count (Algorithm-variance convention used for
/// the k_LR ratio).
pub(crate) fn trace_var_of_mean(rows: &[DVector<f64>], active: &[usize]) -> f64 {
    let p = active.len();
    if p < 2 {
        return 0.0;
    }
    let n = rows[active[0]].len();
    let mut total = 0.0;
    for c in 0..n {
        let mean = active.iter().map(|&i| rows[i][c]).sum::<f64>() / p as f64;
        let var = active.iter().map(|&i| (rows[i][c] - mean).powi(2)).sum::<f64>()
            / (p as f64 - 1.0);
        total += var;
    }
    total / p as f64
}
