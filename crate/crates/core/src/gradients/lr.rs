//! Model-based likelihood-ratio gradients.
//!
//! With a deterministic policy the transition density
//! `p(x_{t+1} | x_t) = N(x_{t+1}; ζ(x_t, π_θ(x_t)))` depends on θ only
//! through the action, so the score chains as
//! `dlog p/dθ = (dlog p/dζ)(dζ/du)(du/dθ)`.
//!
//! In batch-importance-weighted form the step's state distribution is
//! treated as the P-component mixture over particles: every (component i,
//! sample j) pair contributes with weight `p(x_j|ζ_i)/Σ_k p(x_j|ζ_k)`,
//! and baselines are leave-one-out means under the same normalized
//! weights. Densities are evaluated in log-space with max-subtraction.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::diag::Diagnostics;
use crate::rollout::{Controller, DynamicsModel, TrajectoryRecord};

use super::{finalize, step_jacobians, EstimatorKind, GradEstimate};

/// Per-step quantities of the (BIW-)LR estimator for one transition.
pub struct StepLrTerms {
    /// Active particle indices (tapes truncated mid-rollout drop out).
    pub active: Vec<usize>,
    /// `log Σ_k p(x_j | ζ_k)` per sample j (log mixture mass × P).
    pub log_mix: DVector<f64>,
    /// Normalized importance weights `w[(i,j)] = p(x_j|ζ_i)/Σ_k p(x_j|ζ_k)`;
    /// the identity matrix in plain (biw = false) form.
    pub weights: DMatrix<f64>,
    /// Leave-one-out baselines b_i.
    pub baselines: DVector<f64>,
    pub biw: bool,
    pub diag: Diagnostics,
}

impl StepLrTerms {
    /// Score of sample `j` under component `i`'s Gaussian, w.r.t. the
    /// component's (μ, σ): `((x−μ)/σ², ((x−μ)²/σ³ − 1/σ))` per dim.
    pub fn score(
        tape: &TrajectoryRecord,
        t: usize,
        i: usize,
        j: usize,
    ) -> (DVector<f64>, DVector<f64>) {
        let d = tape.state_dim();
        let mut smu = DVector::zeros(d);
        let mut ssd = DVector::zeros(d);
        for k in 0..d {
            let mu = tape.means[t][(i, k)];
            let sd = tape.stds[t][(i, k)];
            let diff = tape.states[t + 1][(j, k)] - mu;
            smu[k] = diff / (sd * sd);
            ssd[k] = diff * diff / (sd * sd * sd) - 1.0 / sd;
        }
        (smu, ssd)
    }
}

fn log_density(tape: &TrajectoryRecord, t: usize, i: usize, j: usize) -> f64 {
    let d = tape.state_dim();
    let mut lp = 0.0;
    for k in 0..d {
        let mu = tape.means[t][(i, k)];
        let sd = tape.stds[t][(i, k)];
        debug_assert!(sd > 0.0, "likelihood-ratio terms need positive sampling stds");
        let z = (tape.states[t + 1][(j, k)] - mu) / sd;
        lp += -0.5 * (2.0 * std::f64::consts::PI).ln() - sd.ln() - 0.5 * z * z;
    }
    lp
}

/// Build the LR terms of transition `t` (components ζ_{t+1} from the tape,
/// samples x_{t+1}) against the suffix returns `g_next = G_{t+1}`.
pub fn lr_step_terms(
    tape: &TrajectoryRecord,
    t: usize,
    g_next: &DVector<f64>,
    biw: bool,
) -> StepLrTerms {
    assert!(t < tape.horizon(), "transition index out of range");
    assert!(!tape.has_gr_steps(), "likelihood-ratio estimators need plain tapes");
    let p = tape.particles();
    let active: Vec<usize> = (0..p).filter(|&i| tape.alive[i] > t).collect();
    let pa = active.len();
    let mut diag = Diagnostics::default();
    let mut weights = DMatrix::zeros(p, p);
    let mut log_mix = DVector::from_element(p, f64::NEG_INFINITY);
    let mut baselines = DVector::zeros(p);

    if biw {
        // dense log-density table over active pairs
        let logp: Vec<Vec<f64>> = active
            .par_iter()
            .map(|&i| active.iter().map(|&j| log_density(tape, t, i, j)).collect())
            .collect();
        for (jj, &j) in active.iter().enumerate() {
            let max = (0..pa).map(|ii| logp[ii][jj]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..pa).map(|ii| (logp[ii][jj] - max).exp()).sum();
            log_mix[j] = max + sum.ln();
            for (ii, &i) in active.iter().enumerate() {
                weights[(i, j)] = (logp[ii][jj] - log_mix[j]).exp();
            }
        }
        for &i in &active {
            let mut num = 0.0;
            let mut den = 0.0;
            for &j in &active {
                if j != i {
                    num += weights[(i, j)] * g_next[j];
                    den += weights[(i, j)];
                }
            }
            baselines[i] = if den > 0.0 {
                num / den
            } else if pa > 1 {
                // importance weights all underflowed: unweighted mean
                diag.baseline_fallbacks += 1;
                active.iter().filter(|&&j| j != i).map(|&j| g_next[j]).sum::<f64>()
                    / (pa - 1) as f64
            } else {
                diag.baseline_fallbacks += 1;
                0.0
            };
        }
    } else {
        for &i in &active {
            weights[(i, i)] = 1.0;
            log_mix[i] = log_density(tape, t, i, i);
            baselines[i] = if pa > 1 {
                active.iter().filter(|&&j| j != i).map(|&j| g_next[j]).sum::<f64>()
                    / (pa - 1) as f64
            } else {
                diag.baseline_fallbacks += 1;
                0.0
            };
        }
    }

    StepLrTerms { active, log_mix, weights, baselines, biw, diag }
}

/// Normalized importance-sampled leave-one-out baseline for particle `i`
/// at transition `t`.
pub fn baseline_biw(tape: &TrajectoryRecord, t: usize, i: usize) -> f64 {
    let suffix = tape.suffix_returns();
    let terms = lr_step_terms(tape, t, &suffix[t + 1], true);
    terms.baselines[i]
}

/// Per-particle θ-space LR rows for one transition; shared by the
/// standalone estimator and total propagation.
pub(crate) fn lr_theta_rows(
    model: &dyn DynamicsModel,
    controller: &dyn Controller,
    tape: &TrajectoryRecord,
    t: usize,
    terms: &StepLrTerms,
    g_next: &DVector<f64>,
) -> Vec<DVector<f64>> {
    let n_theta = controller.param_count();
    let d = tape.state_dim();
    let rows: Vec<DVector<f64>> = (0..tape.particles())
        .into_par_iter()
        .map(|i| {
            if tape.alive[i] <= t {
                return DVector::zeros(n_theta);
            }
            let mut v_mu = DVector::zeros(d);
            let mut v_sd = DVector::zeros(d);
            if terms.biw {
                for &j in &terms.active {
                    let w = terms.weights[(i, j)];
                    if w == 0.0 {
                        continue;
                    }
                    let (smu, ssd) = StepLrTerms::score(tape, t, i, j);
                    let adv = g_next[j] - terms.baselines[i];
                    v_mu += w * adv * smu;
                    v_sd += w * adv * ssd;
                }
            } else {
                let (smu, ssd) = StepLrTerms::score(tape, t, i, i);
                let adv = g_next[i] - terms.baselines[i];
                v_mu = adv * smu;
                v_sd = adv * ssd;
            }
            let jac = step_jacobians(model, controller, tape, t, i);
            jac.theta_grad(&v_mu, &v_sd)
        })
        .collect();
    rows
}

/// Likelihood-ratio gradient over the whole tape: the sum over
/// transitions of the step terms contracted with the baselined suffix
/// returns.
pub fn lr_gradient(
    model: &dyn DynamicsModel,
    controller: &dyn Controller,
    tape: &TrajectoryRecord,
    biw: bool,
) -> GradEstimate {
    assert!(tape.particles() >= 2, "leave-one-out baselines need P >= 2");
    assert!(!tape.has_gr_steps(), "likelihood-ratio estimators need plain tapes");
    let suffix = tape.suffix_returns();
    let n_theta = controller.param_count();
    let mut per_particle = vec![DVector::zeros(n_theta); tape.particles()];
    let mut diag = tape.diag;
    for t in 0..tape.horizon() {
        let terms = lr_step_terms(tape, t, &suffix[t + 1], biw);
        diag.merge(&terms.diag);
        let rows = lr_theta_rows(model, controller, tape, t, &terms, &suffix[t + 1]);
        for (acc, row) in per_particle.iter_mut().zip(rows) {
            *acc += row;
        }
    }
    let kind = if biw { EstimatorKind::BiwLr } else { EstimatorKind::Lr };
    finalize(per_particle, kind, None, diag)
}
