//! Particle trajectory prediction through a learned model.
//!
//! A rollout pushes `P` particles through `T` transitions. Each transition
//! evaluates the controller, queries the dynamics model for the Gaussian
//! parameters `ζ = (μ, σ)` of the next state, and samples
//! `x' = μ + σ∘ε` with `ε` drawn from a counter stream keyed by
//! `(seed, particle, step, dim)`. The full tape (states, actions, ζ's,
//! ε's, costs) is recorded so gradient estimators can replay the chain
//! backwards without re-simulating.
//!
//! Gaussian-resampling mode refits the particle cloud to a Gaussian
//! (sample mean and full covariance) before each propagation and redraws
//! the particles through the Cholesky factor.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chol::cholesky_with_jitter;
use crate::diag::Diagnostics;
use crate::rng::{domain, CounterRng};

/// Variance floor applied before square roots and density evaluations.
pub const VAR_FLOOR: f64 = 1e-12;

/// Gaussian parameters of a predicted next state, with the model
/// (epistemic) and noise variance kept separate so the propagation
/// ablations can be applied consistently in forward and backward passes.
#[derive(Debug, Clone)]
pub struct DistParams {
    /// Next-state mean (already includes the current state for delta models).
    pub mean: DVector<f64>,
    /// Model uncertainty σ_f² per dimension.
    pub var_model: DVector<f64>,
    /// Learned noise σ_n² per dimension (input-independent).
    pub var_noise: DVector<f64>,
}

/// Jacobians of [`DistParams`] w.r.t. the model inputs.
#[derive(Debug, Clone)]
pub struct DistJacobians {
    pub dmean_dx: DMatrix<f64>,      // D×D
    pub dmean_du: DMatrix<f64>,      // D×F
    pub dvar_model_dx: DMatrix<f64>, // D×D
    pub dvar_model_du: DMatrix<f64>, // D×F
}

/// A probabilistic one-step dynamics model.
pub trait DynamicsModel: Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DistParams;
    fn predict_with_grads(&self, x: &DVector<f64>, u: &DVector<f64>)
        -> (DistParams, DistJacobians);
}

/// Controller Jacobians: action w.r.t. state and w.r.t. the flattened
/// parameter vector.
#[derive(Debug, Clone)]
pub struct ControllerJacobians {
    pub du_dx: DMatrix<f64>,     // F×D
    pub du_dtheta: DMatrix<f64>, // F×|θ|
}

/// A deterministic differentiable controller.
pub trait Controller: Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn param_count(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobians(&self, x: &DVector<f64>) -> ControllerJacobians;
    fn params(&self) -> DVector<f64>;
    fn set_params(&mut self, params: &DVector<f64>);
}

/// A per-state cost with gradient, bounded or not.
pub trait CostFunction: Sync {
    fn cost(&self, x: &DVector<f64>) -> f64;
    fn cost_grad(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// Diagonal-Gaussian initial state distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialStateDist {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InitialStateDist {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rng: &CounterRng, particle: u64) -> DVector<f64> {
        DVector::from_fn(self.mean.len(), |d, _| {
            self.mean[d]
                + self.std[d] * rng.normal(&[domain::INIT_STATE, particle, d as u64])
        })
    }
}

/// How particles are advanced.
///
/// `Plain` and `FixedSeed` run the identical sampling code; the difference
/// is ownership of the seed. In plain mode the caller derives a fresh
/// `seed` per batch, while fixed-seed mode reuses one seed so the rollout
/// is a deterministic function of the policy parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    Plain,
    FixedSeed,
    GaussianResample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Particle count P (≥ 2 for baselined estimators).
    pub particles: usize,
    /// Horizon T: number of transitions; T+1 states are recorded.
    pub horizon: usize,
    pub mode: RolloutMode,
    /// Drop σ_f², sampling with the learned noise only.
    pub drop_model_uncertainty: bool,
    /// Multiplier m on the noise variance: σ² = σ_f² + m·σ_n².
    pub noise_variance_multiplier: f64,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            particles: 300,
            horizon: 30,
            mode: RolloutMode::Plain,
            drop_model_uncertainty: false,
            noise_variance_multiplier: 1.0,
            seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.particles == 0 {
            return Err(crate::Error::Config("particle count must be >= 1".into()));
        }
        if self.noise_variance_multiplier < 0.0 {
            return Err(crate::Error::Config("noise variance multiplier must be >= 0".into()));
        }
        Ok(())
    }

    /// Effective sampling variance per dimension after the ablations.
    pub fn effective_var(&self, dp: &DistParams, diag: &mut Diagnostics) -> DVector<f64> {
        let d = dp.mean.len();
        DVector::from_fn(d, |i, _| {
            let v = if self.drop_model_uncertainty {
                dp.var_noise[i]
            } else {
                dp.var_model[i] + self.noise_variance_multiplier * dp.var_noise[i]
            };
            if v < 0.0 {
                diag.variance_clamps += 1;
                VAR_FLOOR
            } else {
                v
            }
        })
    }

    /// Effective std and its Jacobians w.r.t. (x, u). Dimensions whose
    /// variance sits at or below the floor get zero gradient.
    pub fn effective_std_grads(
        &self,
        dp: &DistParams,
        jac: &DistJacobians,
        diag: &mut Diagnostics,
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let var = self.effective_var(dp, diag);
        let d = var.len();
        let f = jac.dmean_du.ncols();
        let std = var.map(|v| v.sqrt());
        let mut dstd_dx = DMatrix::zeros(d, d);
        let mut dstd_du = DMatrix::zeros(d, f);
        if !self.drop_model_uncertainty {
            for i in 0..d {
                if var[i] > VAR_FLOOR {
                    let inv = 0.5 / std[i];
                    for j in 0..d {
                        dstd_dx[(i, j)] = inv * jac.dvar_model_dx[(i, j)];
                    }
                    for j in 0..f {
                        dstd_du[(i, j)] = inv * jac.dvar_model_du[(i, j)];
                    }
                }
            }
        }
        (std, dstd_dx, dstd_du)
    }
}

/// Particle states at one time step with their RNG stream ids.
#[derive(Debug, Clone)]
pub struct StateBatch {
    /// P×D state matrix.
    pub states: DMatrix<f64>,
    /// Stream id per particle; resampling keeps ids attached to slots.
    pub streams: Vec<u64>,
}

impl StateBatch {
    pub fn new(states: DMatrix<f64>) -> Self {
        let streams = (0..states.nrows() as u64).collect();
        StateBatch { states, streams }
    }

    pub fn particles(&self) -> usize {
        self.states.nrows()
    }
}

/// Record of one Gaussian-resampling step.
#[derive(Debug, Clone)]
pub struct GrStep {
    /// Batch mean μ̂.
    pub mean: DVector<f64>,
    /// Cholesky factor L of the (jittered) sample covariance.
    pub chol: DMatrix<f64>,
    /// Standard-normal draws z, P×D.
    pub draws: DMatrix<f64>,
    /// Resampled particles μ̂ + L z, P×D.
    pub resampled: DMatrix<f64>,
}

/// One propagation step's outputs.
pub struct StepRecord {
    pub actions: DMatrix<f64>, // P×F
    pub means: DMatrix<f64>,   // P×D
    pub stds: DMatrix<f64>,    // P×D (effective, post-ablation)
    pub eps: DMatrix<f64>,     // P×D
    pub next: StateBatch,
}

/// Full rollout tape; sufficient to replay the backward pass.
pub struct TrajectoryRecord {
    pub cfg: RolloutConfig,
    /// T+1 matrices of P×D pre-resampling states.
    pub states: Vec<DMatrix<f64>>,
    /// T matrices of P×F actions taken at the propagation source.
    pub actions: Vec<DMatrix<f64>>,
    /// T matrices of P×D next-state means ζ^μ_{t+1}.
    pub means: Vec<DMatrix<f64>>,
    /// T matrices of P×D effective stds ζ^σ_{t+1}.
    pub stds: Vec<DMatrix<f64>>,
    /// T matrices of P×D standard-normal draws.
    pub eps: Vec<DMatrix<f64>>,
    /// T+1 vectors of per-particle costs.
    pub costs: Vec<DVector<f64>>,
    /// Per transition: the resampling record, when GR ran before it.
    pub gr: Vec<Option<GrStep>>,
    /// Per particle: number of valid transitions (== horizon unless the
    /// particle's tape was truncated after a non-finite state).
    pub alive: Vec<usize>,
    pub diag: Diagnostics,
}

impl TrajectoryRecord {
    pub fn particles(&self) -> usize {
        self.states[0].nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].ncols()
    }

    pub fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    pub fn has_gr_steps(&self) -> bool {
        self.gr.iter().any(|g| g.is_some())
    }

    /// The states particles were propagated from at transition `t`
    /// (resampled if GR ran there, the raw states otherwise).
    pub fn source_states(&self, t: usize) -> &DMatrix<f64> {
        match &self.gr[t] {
            Some(step) => &step.resampled,
            None => &self.states[t],
        }
    }

    /// Per-particle returns G_i = Σ_t c(x_{i,t}).
    pub fn returns(&self) -> DVector<f64> {
        let p = self.particles();
        let mut g = DVector::zeros(p);
        for c in &self.costs {
            g += c;
        }
        g
    }

    /// Suffix returns S[t][i] = Σ_{h=t}^T c_{i,h}.
    pub fn suffix_returns(&self) -> Vec<DVector<f64>> {
        let t_max = self.costs.len();
        let mut suffix = vec![DVector::zeros(self.particles()); t_max];
        suffix[t_max - 1] = self.costs[t_max - 1].clone();
        for t in (0..t_max - 1).rev() {
            suffix[t] = &self.costs[t] + &suffix[t + 1];
        }
        suffix
    }

    /// Mean return and its standard error (√(Var/P)).
    pub fn mean_return(&self) -> (f64, f64) {
        let g = self.returns();
        let p = g.len() as f64;
        let mean = g.mean();
        if g.len() < 2 {
            return (mean, 0.0);
        }
        let var = g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (p - 1.0);
        (mean, (var / p).sqrt())
    }

    /// Dump the tape as CSV rows (t, i, x…, u…, μ…, σ…, ε…, cost).
    pub fn dump_csv<W: std::io::Write>(&self, w: W) -> crate::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let d = self.state_dim();
        let f = self.actions.first().map_or(0, |a| a.ncols());
        let mut header = vec!["t".to_string(), "i".to_string()];
        for k in 0..d {
            header.push(format!("x{k}"));
        }
        for k in 0..f {
            header.push(format!("u{k}"));
        }
        for k in 0..d {
            header.push(format!("mu{k}"));
        }
        for k in 0..d {
            header.push(format!("sigma{k}"));
        }
        for k in 0..d {
            header.push(format!("eps{k}"));
        }
        header.push("cost".to_string());
        wtr.write_record(&header)?;
        for t in 0..=self.horizon() {
            for i in 0..self.particles() {
                let mut row = vec![t.to_string(), i.to_string()];
                for k in 0..d {
                    row.push(format!("{:?}", self.states[t][(i, k)]));
                }
                let last = t == self.horizon();
                for k in 0..f {
                    row.push(if last {
                        String::new()
                    } else {
                        format!("{:?}", self.actions[t][(i, k)])
                    });
                }
                for k in 0..d {
                    row.push(if last {
                        String::new()
                    } else {
                        format!("{:?}", self.means[t][(i, k)])
                    });
                }
                for k in 0..d {
                    row.push(if last {
                        String::new()
                    } else {
                        format!("{:?}", self.stds[t][(i, k)])
                    });
                }
                for k in 0..d {
                    row.push(if last {
                        String::new()
                    } else {
                        format!("{:?}", self.eps[t][(i, k)])
                    });
                }
                row.push(format!("{:?}", self.costs[t][i]));
                wtr.write_record(&row)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Advance a particle batch one step with explicit standard-normal draws
/// (test hook; [`propagate_step`] derives the draws from the config seed).
pub fn propagate_step_with_draws(
    model: &dyn DynamicsModel,
    controller: &dyn Controller,
    batch: &StateBatch,
    cfg: &RolloutConfig,
    eps: &DMatrix<f64>,
) -> (StepRecord, Diagnostics) {
    let p = batch.particles();
    let d = model.state_dim();
    let f = model.action_dim();
    assert_eq!(batch.states.ncols(), d, "state dimension mismatch");
    assert_eq!(eps.nrows(), p);
    assert_eq!(eps.ncols(), d);

    let rows: Vec<_> = (0..p)
        .into_par_iter()
        .map(|i| {
            let mut diag = Diagnostics::default();
            let x = DVector::from_iterator(d, batch.states.row(i).iter().copied());
            let u = controller.eval(&x);
            let dp = model.predict(&x, &u);
            let var = cfg.effective_var(&dp, &mut diag);
            let std = var.map(|v| v.sqrt());
            let next = DVector::from_fn(d, |k, _| dp.mean[k] + std[k] * eps[(i, k)]);
            (u, dp.mean, std, next, diag)
        })
        .collect();

    let mut diag = Diagnostics::default();
    let mut actions = DMatrix::zeros(p, f);
    let mut means = DMatrix::zeros(p, d);
    let mut stds = DMatrix::zeros(p, d);
    let mut next = DMatrix::zeros(p, d);
    for (i, (u, m, s, nx, dg)) in rows.into_iter().enumerate() {
        for k in 0..f {
            actions[(i, k)] = u[k];
        }
        for k in 0..d {
            means[(i, k)] = m[k];
            stds[(i, k)] = s[k];
            next[(i, k)] = nx[k];
        }
        diag.merge(&dg);
    }
    let record = StepRecord {
        actions,
        means,
        stds,
        eps: eps.clone(),
        next: StateBatch { states: next, streams: batch.streams.clone() },
    };
    (record, diag)
}

/// Advance a particle batch one step; ε's come from the counter stream at
/// `(seed, particle-stream, step, dim)`.
pub fn propagate_step(
    model: &dyn DynamicsModel,
    controller: &dyn Controller,
    batch: &StateBatch,
    cfg: &RolloutConfig,
    step: usize,
) -> (StepRecord, Diagnostics) {
    let rng = CounterRng::new(cfg.seed);
    let d = model.state_dim();
    let eps = DMatrix::from_fn(batch.particles(), d, |i, k| {
        rng.normal(&[domain::DYNAMICS, batch.streams[i], step as u64, k as u64])
    });
    propagate_step_with_draws(model, controller, batch, cfg, &eps)
}

/// Refit the batch to a Gaussian and resample with explicit draws
/// (test hook; all-zero draws place every particle at the batch mean).
pub fn gr_resample_with_draws(
    batch: &StateBatch,
    draws: &DMatrix<f64>,
    diag: &mut Diagnostics,
) -> GrStep {
    let p = batch.particles();
    let d = batch.states.ncols();
    assert!(p >= 2, "resampling needs at least two particles");
    let mean = DVector::from_fn(d, |k, _| batch.states.column(k).mean());
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..p {
        let dev = DVector::from_fn(d, |k, _| batch.states[(i, k)] - mean[k]);
        cov += &dev * dev.transpose();
    }
    cov /= (p - 1) as f64;

    let trace = cov.trace();
    let base = if trace > 0.0 { 1e-9 * trace / d as f64 } else { VAR_FLOOR };
    let jc = cholesky_with_jitter(&cov, base, base * 1e9)
        .expect("sample covariance not factorizable even with jitter");
    diag.jitter_escalations += jc.escalations;
    let l = jc.chol.l();

    let mut resampled = DMatrix::zeros(p, d);
    for i in 0..p {
        let z = DVector::from_fn(d, |k, _| draws[(i, k)]);
        let x = &mean + &l * z;
        for k in 0..d {
            resampled[(i, k)] = x[k];
        }
    }
    GrStep { mean, chol: l, draws: draws.clone(), resampled }
}

/// Gaussian resampling: fit `N(μ̂, Σ̂)` to the batch and redraw every
/// particle as `x' = μ̂ + L z`, `z ~ N(0, I)`.
pub fn gr_resample(
    batch: &StateBatch,
    cfg: &RolloutConfig,
    step: usize,
    diag: &mut Diagnostics,
) -> GrStep {
    let rng = CounterRng::new(cfg.seed);
    let d = batch.states.ncols();
    let draws = DMatrix::from_fn(batch.particles(), d, |i, k| {
        rng.normal(&[domain::GR_RESAMPLE, batch.streams[i], step as u64, k as u64])
    });
    gr_resample_with_draws(batch, &draws, diag)
}

/// Roll a particle batch from the initial distribution through `T`
/// transitions, recording the full tape.
pub fn rollout_batch(
    model: &dyn DynamicsModel,
    controller: &dyn Controller,
    cost: &dyn CostFunction,
    cfg: &RolloutConfig,
    init: &InitialStateDist,
) -> TrajectoryRecord {
    cfg.validate().expect("invalid rollout config");
    let p = cfg.particles;
    let d = model.state_dim();
    assert_eq!(init.dim(), d, "initial distribution dimension mismatch");
    let t_max = cfg.horizon;
    let rng = CounterRng::new(cfg.seed);

    let mut diag = Diagnostics::default();
    let mut states = Vec::with_capacity(t_max + 1);
    let mut actions = Vec::with_capacity(t_max);
    let mut means = Vec::with_capacity(t_max);
    let mut stds = Vec::with_capacity(t_max);
    let mut eps = Vec::with_capacity(t_max);
    let mut costs = Vec::with_capacity(t_max + 1);
    let mut gr = Vec::with_capacity(t_max);
    let mut alive = vec![t_max; p];

    let x0 = DMatrix::from_fn(p, d, |i, k| {
        init.mean[k] + init.std[k] * rng.normal(&[domain::INIT_STATE, i as u64, k as u64])
    });
    let mut batch = StateBatch::new(x0);
    states.push(batch.states.clone());

    for t in 0..=t_max {
        let cost_row = DVector::from_fn(p, |i, _| {
            if alive[i] >= t {
                cost.cost(&DVector::from_iterator(d, states[t].row(i).iter().copied()))
            } else {
                0.0
            }
        });
        costs.push(cost_row);
        if t == t_max {
            break;
        }

        // GR refits the *predicted* cloud, so the initial Gaussian draw
        // at t = 0 is propagated directly.
        let gr_step = if cfg.mode == RolloutMode::GaussianResample && t >= 1 {
            let step = gr_resample(&batch, cfg, t, &mut diag);
            batch = StateBatch { states: step.resampled.clone(), streams: batch.streams.clone() };
            Some(step)
        } else {
            None
        };
        gr.push(gr_step);

        let (rec, step_diag) = propagate_step(model, controller, &batch, cfg, t);
        diag.merge(&step_diag);

        let mut next = rec.next;
        for i in 0..p {
            if alive[i] > t {
                let finite = (0..d).all(|k| next.states[(i, k)].is_finite());
                if !finite {
                    alive[i] = t;
                    diag.truncated_particles += 1;
                }
            }
            if alive[i] <= t {
                // freeze truncated particles at their last finite state
                for k in 0..d {
                    next.states[(i, k)] = states[t][(i, k)];
                }
            }
        }

        actions.push(rec.actions);
        means.push(rec.means);
        stds.push(rec.stds);
        eps.push(rec.eps);
        states.push(next.states.clone());
        batch = next;
    }

    TrajectoryRecord {
        cfg: cfg.clone(),
        states,
        actions,
        means,
        stds,
        eps,
        costs,
        gr,
        alive,
        diag,
    }
}
