//! Total propagation: a single backward pass that fuses the LR and RP
//! gradient contributions at every step by inverse-variance weighting.
//!
//! At each backward step the pathwise adjoint and the score-function term
//! are both projected to policy-parameter space through the same
//! `dζ/du · du/dθ` chain, their per-particle trace variances are compared,
//! and the convex combination with `k_LR = 1/(1 + σ²_LR/σ²_RP)` is
//! accumulated into the gradient; the combined distribution-space adjoint
//! is what flows to the previous step, so the pass implicitly averages
//! over every possible pathwise depth.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::rollout::{Controller, CostFunction, DynamicsModel, TrajectoryRecord};

use super::lr::{lr_step_terms, lr_theta_rows, StepLrTerms};
use super::{
    finalize, klr_weight, step_jacobians, trace_var_of_mean, EstimatorKind, GradEstimate,
    StepJac,
};

/// Run the total-propagation backward pass. With `biw` set the θ-space LR
/// term at each step uses the P²-term batch-importance-weighted estimator;
/// the distribution-space pass-back always uses the per-particle score.
pub fn total_propagation(
    model: &dyn DynamicsModel,
    controller: &dyn Controller,
    cost: &dyn CostFunction,
    tape: &TrajectoryRecord,
    biw: bool,
) -> GradEstimate {
    assert!(tape.particles() >= 2, "total propagation needs P >= 2");
    assert!(!tape.has_gr_steps(), "total propagation needs plain tapes");
    assert!(tape.horizon() >= 1, "total propagation needs at least one transition");

    let p = tape.particles();
    let d = tape.state_dim();
    let t_max = tape.horizon();
    let n_theta = controller.param_count();
    let suffix = tape.suffix_returns();
    let mut diag = tape.diag;

    let mut per_particle = vec![DVector::zeros(n_theta); p];
    let mut klr_trace = Vec::with_capacity(t_max);
    // combined dG_{i,t+1}/dζ_{i,t+1} passed back between steps
    let mut gzeta: Vec<(DVector<f64>, DVector<f64>)> =
        vec![(DVector::zeros(d), DVector::zeros(d)); p];
    // Jacobians of transition t, reused from the previous iteration
    let mut jacs_next: Option<Vec<StepJac>> = None;

    for t in (1..=t_max).rev() {
        let s = t - 1; // transition s: ζ_t = ζ(x_s, u_s)
        let jacs_prev: Vec<StepJac> = (0..p)
            .into_par_iter()
            .map(|i| step_jacobians(model, controller, tape, s, i))
            .collect();

        // pathwise adjoint at level t: dG/dx_t through the combined
        // pass-back plus the local cost slope
        let xbar: Vec<DVector<f64>> = (0..p)
            .map(|i| {
                let mut xb = DVector::zeros(d);
                if t < t_max && tape.alive[i] > t {
                    let jn = &jacs_next.as_ref().unwrap()[i];
                    xb += jn.xbar(&gzeta[i].0, &gzeta[i].1);
                }
                if tape.alive[i] >= t {
                    xb += cost.cost_grad(&DVector::from_iterator(
                        d,
                        tape.states[t].row(i).iter().copied(),
                    ));
                }
                xb
            })
            .collect();

        let terms: StepLrTerms = lr_step_terms(tape, s, &suffix[t], biw);
        diag.merge(&terms.diag);
        let active = terms.active.clone();

        // θ-space rows for both estimators through the same dζ/du·du/dθ
        let rp_rows: Vec<DVector<f64>> = (0..p)
            .map(|i| {
                if tape.alive[i] < t {
                    return DVector::zeros(n_theta);
                }
                let sd_bar = DVector::from_fn(d, |k, _| xbar[i][k] * tape.eps[s][(i, k)]);
                jacs_prev[i].theta_grad(&xbar[i], &sd_bar)
            })
            .collect();
        let lr_rows = lr_theta_rows(model, controller, tape, s, &terms, &suffix[t]);

        let var_rp = trace_var_of_mean(&rp_rows, &active);
        let var_lr = trace_var_of_mean(&lr_rows, &active);
        let k = klr_weight(var_lr, var_rp, &mut diag);
        klr_trace.push(k);

        for i in 0..p {
            per_particle[i] += k * &lr_rows[i] + (1.0 - k) * &rp_rows[i];
        }

        // combined distribution-space adjoint for step t−1
        gzeta = (0..p)
            .map(|i| {
                if tape.alive[i] < t {
                    return (DVector::zeros(d), DVector::zeros(d));
                }
                let sd_bar = DVector::from_fn(d, |k, _| xbar[i][k] * tape.eps[s][(i, k)]);
                let (smu, ssd) = StepLrTerms::score(tape, s, i, i);
                let adv = suffix[t][i] - terms.baselines[i];
                let mu = k * adv * smu + (1.0 - k) * &xbar[i];
                let sd = k * adv * ssd + (1.0 - k) * sd_bar;
                (mu, sd)
            })
            .collect();
        jacs_next = Some(jacs_prev);
    }

    klr_trace.reverse();
    finalize(per_particle, EstimatorKind::Tp, Some(klr_trace), diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradients::{lr_gradient, rp_gradient};
    use crate::rollout::{rollout_batch, InitialStateDist, RolloutConfig};
    use crate::toy::{
        linear_chain_analytic_grad, BiasController, LinearGaussianDynamics, QuadraticCost,
    };

    #[test]
    fn one_step_mean_matches_analytic_gradient() {
        let theta = 0.5;
        let dynamics = LinearGaussianDynamics::scalar(0.0, 1.0, 0.6);
        let controller = BiasController::new(1, DVector::from_element(1, theta));
        let init = InitialStateDist { mean: vec![0.0], std: vec![0.0] };
        let cfg = RolloutConfig { particles: 20_000, horizon: 1, seed: 13, ..Default::default() };
        let tape = rollout_batch(&dynamics, &controller, &QuadraticCost, &cfg, &init);
        let est = total_propagation(&dynamics, &controller, &QuadraticCost, &tape, true);
        let se = est.var_of_mean[0].sqrt();
        assert!(
            (est.grad[0] - 2.0 * theta).abs() < 3.0 * se,
            "{} vs {} (se {se})",
            est.grad[0],
            2.0 * theta
        );
    }

    #[test]
    fn single_step_tape_collapses_to_weighted_combination() {
        let dynamics = LinearGaussianDynamics::scalar(0.0, 1.0, 0.4);
        let controller = BiasController::new(1, DVector::from_element(1, 0.3));
        let init = InitialStateDist { mean: vec![0.0], std: vec![0.0] };
        let cfg = RolloutConfig { particles: 300, horizon: 1, seed: 7, ..Default::default() };
        let tape = rollout_batch(&dynamics, &controller, &QuadraticCost, &cfg, &init);
        let tp = total_propagation(&dynamics, &controller, &QuadraticCost, &tape, true);
        let rp = rp_gradient(&dynamics, &controller, &QuadraticCost, &tape);
        let lr = lr_gradient(&dynamics, &controller, &tape, true);
        let k = tp.klr_trace.as_ref().unwrap()[0];
        assert!((0.0..=1.0).contains(&k));
        let want = k * lr.grad[0] + (1.0 - k) * rp.grad[0];
        assert!(
            (tp.grad[0] - want).abs() <= 1e-12 * want.abs().max(1.0),
            "tp {} vs k·lr+(1−k)·rp {want}",
            tp.grad[0]
        );
    }

    #[test]
    fn klr_stays_in_unit_interval_on_multistep_tapes() {
        let dynamics = LinearGaussianDynamics::scalar(0.9, 1.0, 0.3);
        let controller = BiasController::new(1, DVector::from_element(1, 0.2));
        let init = InitialStateDist { mean: vec![0.1], std: vec![0.1] };
        let cfg = RolloutConfig { particles: 100, horizon: 10, seed: 23, ..Default::default() };
        let tape = rollout_batch(&dynamics, &controller, &QuadraticCost, &cfg, &init);
        let est = total_propagation(&dynamics, &controller, &QuadraticCost, &tape, true);
        let trace = est.klr_trace.unwrap();
        assert_eq!(trace.len(), 10);
        for k in trace {
            assert!((0.0..=1.0).contains(&k), "k_LR out of range: {k}");
        }
    }

    #[test]
    fn two_step_chain_matches_hand_derived_gradient() {
        let (a, b, theta) = (0.8, 1.0, 0.3);
        let dynamics = LinearGaussianDynamics::scalar(a, b, 0.4);
        let controller = BiasController::new(1, DVector::from_element(1, theta));
        let init = InitialStateDist { mean: vec![0.0], std: vec![0.0] };
        let cfg = RolloutConfig { particles: 10_000, horizon: 2, seed: 37, ..Default::default() };
        let tape = rollout_batch(&dynamics, &controller, &QuadraticCost, &cfg, &init);
        let analytic = linear_chain_analytic_grad(a, b, theta, 2);
        let est = total_propagation(&dynamics, &controller, &QuadraticCost, &tape, true);
        let se = est.var_of_mean[0].sqrt().max(1e-12);
        assert!(
            (est.grad[0] - analytic).abs() < 3.0 * se,
            "tp {} vs analytic {analytic} (se {se})",
            est.grad[0]
        );
    }
}
