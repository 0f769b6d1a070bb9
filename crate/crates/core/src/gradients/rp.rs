//! Pathwise (reparameterization) gradients by a reverse pass over the tape.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::chol::chol_reverse;
use crate::rollout::{Controller, CostFunction, DynamicsModel, GrStep, TrajectoryRecord};

use super::{finalize, step_jacobians, EstimatorKind, GradEstimate};

/// Pathwise gradient of the mean return through a plain or fixed-seed
/// tape: per particle, the chain rule through (cost, dynamics, policy)
/// with `dx/dμ = I`, `dx/dσ = diag(ε)`.
pub fn rp_gradient(
    model: &dyn DynamicsModel,
    controller: &dyn Controller,
    cost: &dyn CostFunction,
    tape: &TrajectoryRecord,
) -> GradEstimate {
    assert!(
        !tape.has_gr_steps(),
        "resampled tapes carry cross-particle coupling; use gr_rp_gradient"
    );
    backward_pathwise(model, controller, cost, tape, EstimatorKind::Rp)
}

/// Pathwise gradient through a Gaussian-resampling tape. The refit
/// couples particles through the batch mean and the Cholesky factor of
/// the batch covariance; per-particle rows attribute each contribution to
/// the transition's particle slot.
pub fn gr_rp_gradient(
    model: &dyn DynamicsModel,
    controller: &dyn Controller,
    cost: &dyn CostFunction,
    tape: &TrajectoryRecord,
) -> GradEstimate {
    backward_pathwise(model, controller, cost, tape, EstimatorKind::Gr)
}

fn backward_pathwise(
    model: &dyn DynamicsModel,
    controller: &dyn Controller,
    cost: &dyn CostFunction,
    tape: &TrajectoryRecord,
    kind: EstimatorKind,
) -> GradEstimate {
    let p = tape.particles();
    let d = tape.state_dim();
    let t_max = tape.horizon();
    let n_theta = controller.param_count();
    let diag = tape.diag;

    let mut per_particle = vec![DVector::zeros(n_theta); p];
    // dG_i/dx at the current level, one row per particle
    let mut xbar: Vec<DVector<f64>> = (0..p)
        .map(|i| {
            if tape.alive[i] == t_max {
                cost.cost_grad(&DVector::from_iterator(
                    d,
                    tape.states[t_max].row(i).iter().copied(),
                ))
            } else {
                DVector::zeros(d)
            }
        })
        .collect();

    for t in (0..t_max).rev() {
        let results: Vec<(DVector<f64>, DVector<f64>)> = (0..p)
            .into_par_iter()
            .map(|i| {
                if tape.alive[i] <= t {
                    return (DVector::zeros(n_theta), DVector::zeros(d));
                }
                let jac = step_jacobians(model, controller, tape, t, i);
                let mu_bar = &xbar[i];
                let sd_bar = DVector::from_fn(d, |k, _| xbar[i][k] * tape.eps[t][(i, k)]);
                (jac.theta_grad(mu_bar, &sd_bar), jac.xbar(mu_bar, &sd_bar))
            })
            .collect();

        let mut next_xbar: Vec<DVector<f64>> = Vec::with_capacity(p);
        for (i, (theta_contrib, x_src)) in results.into_iter().enumerate() {
            per_particle[i] += theta_contrib;
            next_xbar.push(x_src);
        }
        if let Some(gr) = &tape.gr[t] {
            next_xbar = resample_backward(gr, &next_xbar, &tape.states[t]);
        }
        for (i, row) in next_xbar.iter_mut().enumerate() {
            if tape.alive[i] >= t {
                *row += cost.cost_grad(&DVector::from_iterator(
                    d,
                    tape.states[t].row(i).iter().copied(),
                ));
            }
        }
        xbar = next_xbar;
    }

    finalize(per_particle, kind, None, diag)
}

/// Push adjoints of the resampled particles back to the pre-resampling
/// batch: through the batch mean, and through the covariance via the
/// Cholesky-factor derivative.
fn resample_backward(
    gr: &GrStep,
    xbar_post: &[DVector<f64>],
    pre_states: &DMatrix<f64>,
) -> Vec<DVector<f64>> {
    let p = xbar_post.len();
    let d = gr.mean.len();
    let mut mubar = DVector::zeros(d);
    let mut lbar = DMatrix::zeros(d, d);
    for (i, xb) in xbar_post.iter().enumerate() {
        mubar += xb;
        for r in 0..d {
            // x' = μ̂ + L z, only the lower triangle of L is live
            for c in 0..=r {
                lbar[(r, c)] += xb[r] * gr.draws[(i, c)];
            }
        }
    }
    let sbar = chol_reverse(&gr.chol, &lbar);
    let scale = 2.0 / (p as f64 - 1.0);
    (0..p)
        .map(|j| {
            let dev = DVector::from_fn(d, |k, _| pre_states[(j, k)] - gr.mean[k]);
            &mubar / p as f64 + scale * (&sbar * dev)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::{rollout_batch, InitialStateDist, RolloutConfig, RolloutMode};
    use crate::toy::{BiasController, LinearGaussianDynamics, QuadraticCost};

    fn one_step_setup(
        theta: f64,
        sigma: f64,
    ) -> (LinearGaussianDynamics, BiasController, QuadraticCost, InitialStateDist) {
        (
            LinearGaussianDynamics::scalar(0.0, 1.0, sigma),
            BiasController::new(1, DVector::from_element(1, theta)),
            QuadraticCost,
            InitialStateDist { mean: vec![0.0], std: vec![0.0] },
        )
    }

    #[test]
    fn one_step_toy_matches_per_particle_form_and_mean() {
        // x₁ = θ + σε, c = x₁²: the pathwise estimate per particle is
        // 2(θ + σε); the batch mean approaches 2θ
        let theta = 0.7;
        let sigma = 0.5;
        let (dynamics, controller, cost, init) = one_step_setup(theta, sigma);
        let cfg = RolloutConfig { particles: 20_000, horizon: 1, seed: 5, ..Default::default() };
        let tape = rollout_batch(&dynamics, &controller, &cost, &cfg, &init);
        let est = rp_gradient(&dynamics, &controller, &cost, &tape);
        for i in 0..200 {
            let want = 2.0 * (theta + sigma * tape.eps[0][(i, 0)]);
            assert!(
                (est.per_particle[(i, 0)] - want).abs() < 1e-12,
                "particle {i}: {} vs {want}",
                est.per_particle[(i, 0)]
            );
        }
        let se = est.var_of_mean[0].sqrt();
        assert!(
            (est.grad[0] - 2.0 * theta).abs() < 3.0 * se,
            "{} vs 2θ = {} (se {se})",
            est.grad[0],
            2.0 * theta
        );
    }

    #[test]
    fn zero_noise_collapses_to_deterministic_chain_rule() {
        let theta = 0.3;
        let (dynamics, controller, cost, init) = one_step_setup(theta, 0.0);
        let cfg = RolloutConfig { particles: 8, horizon: 1, seed: 2, ..Default::default() };
        let tape = rollout_batch(&dynamics, &controller, &cost, &cfg, &init);
        let est = rp_gradient(&dynamics, &controller, &cost, &tape);
        for i in 0..8 {
            assert!((est.per_particle[(i, 0)] - 2.0 * theta).abs() < 1e-14);
        }
        assert!(est.var_of_mean[0] < 1e-28);
    }

    #[test]
    fn fixed_seed_estimates_are_bit_identical() {
        let (dynamics, controller, cost, init) = one_step_setup(0.2, 0.4);
        let cfg = RolloutConfig {
            particles: 64,
            horizon: 3,
            mode: RolloutMode::FixedSeed,
            seed: 123,
            ..Default::default()
        };
        let t1 = rollout_batch(&dynamics, &controller, &cost, &cfg, &init);
        let t2 = rollout_batch(&dynamics, &controller, &cost, &cfg, &init);
        let e1 = rp_gradient(&dynamics, &controller, &cost, &t1);
        let e2 = rp_gradient(&dynamics, &controller, &cost, &t2);
        assert_eq!(e1.grad[0].to_bits(), e2.grad[0].to_bits());
    }

    #[test]
    fn multi_step_gradient_matches_fixed_seed_finite_differences() {
        let a = 0.8;
        let sigma = 0.3;
        let dynamics = LinearGaussianDynamics::scalar(a, 1.0, sigma);
        let mut controller = BiasController::new(1, DVector::from_element(1, 0.4));
        let cost = QuadraticCost;
        let init = InitialStateDist { mean: vec![0.1], std: vec![0.05] };
        let cfg = RolloutConfig {
            particles: 50,
            horizon: 6,
            mode: RolloutMode::FixedSeed,
            seed: 31,
            ..Default::default()
        };
        let tape = rollout_batch(&dynamics, &controller, &cost, &cfg, &init);
        let est = rp_gradient(&dynamics, &controller, &cost, &tape);

        let h = 1e-6;
        let theta0 = controller.params();
        let mut eval = |v: f64| {
            controller.set_params(&DVector::from_element(1, v));
            let t = rollout_batch(&dynamics, &controller, &cost, &cfg, &init);
            t.returns().mean()
        };
        let fd = (eval(theta0[0] + h) - eval(theta0[0] - h)) / (2.0 * h);
        let rel = (fd - est.grad[0]).abs() / fd.abs().max(est.grad[0].abs());
        assert!(rel < 1e-6, "fd {fd} vs rp {} (rel {rel})", est.grad[0]);
    }

    #[test]
    fn gr_gradient_matches_fixed_seed_finite_differences() {
        let dynamics = LinearGaussianDynamics::scalar(0.7, 1.0, 0.4);
        let mut controller = BiasController::new(1, DVector::from_element(1, 0.3));
        let cost = QuadraticCost;
        let init = InitialStateDist { mean: vec![0.0], std: vec![0.2] };
        let cfg = RolloutConfig {
            particles: 40,
            horizon: 5,
            mode: RolloutMode::GaussianResample,
            seed: 17,
            ..Default::default()
        };
        let tape = rollout_batch(&dynamics, &controller, &cost, &cfg, &init);
        assert!(tape.has_gr_steps());
        let est = gr_rp_gradient(&dynamics, &controller, &cost, &tape);

        let h = 1e-6;
        let theta0 = controller.params();
        let mut eval = |v: f64| {
            controller.set_params(&DVector::from_element(1, v));
            let t = rollout_batch(&dynamics, &controller, &cost, &cfg, &init);
            t.returns().mean()
        };
        let fd = (eval(theta0[0] + h) - eval(theta0[0] - h)) / (2.0 * h);
        let rel = (fd - est.grad[0]).abs() / fd.abs().max(est.grad[0].abs());
        assert!(rel < 1e-5, "fd {fd} vs gr-rp {} (rel {rel})", est.grad[0]);
    }

    #[test]
    fn plain_rp_rejects_resampled_tapes() {
        let (dynamics, controller, cost, init) = one_step_setup(0.1, 0.3);
        let cfg = RolloutConfig {
            particles: 10,
            horizon: 4,
            mode: RolloutMode::GaussianResample,
            seed: 3,
            ..Default::default()
        };
        let tape = rollout_batch(&dynamics, &controller, &cost, &cfg, &init);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            rp_gradient(&dynamics, &controller, &cost, &tape)
        }));
        assert!(result.is_err());
    }
}
