//! Deterministic differentiable controllers.
//!
//! Both controllers map an augmented state — angle dimensions replaced by
//! their (sin, cos) pair so nothing jumps across angle wraps — through a
//! linear or RBF-network map `π̃`, then squash with `u = u_max·sat(π̃)`.
//! The Jacobians chain exactly through the squashing and the trig
//! augmentation; the gradient estimators rely on that.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::{saturate, saturate_deriv};
use crate::rng::{domain, CounterRng};
use crate::rollout::{Controller, ControllerJacobians};

/// Replaces each angle dimension of a raw state with (sin, cos).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleAugment {
    pub raw_dim: usize,
    /// Indices of raw dimensions that are angles.
    pub angle_dims: Vec<usize>,
}

impl AngleAugment {
    pub fn none(raw_dim: usize) -> Self {
        AngleAugment { raw_dim, angle_dims: Vec::new() }
    }

    pub fn augmented_dim(&self) -> usize {
        self.raw_dim + self.angle_dims.len()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.raw_dim, "state dimension mismatch");
        let mut out = Vec::with_capacity(self.augmented_dim());
        for d in 0..self.raw_dim {
            if self.angle_dims.contains(&d) {
                out.push(x[d].sin());
                out.push(x[d].cos());
            } else {
                out.push(x[d]);
            }
        }
        DVector::from_vec(out)
    }

    /// Jacobian of the augmented vector w.r.t. the raw state (A×D).
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.augmented_dim(), self.raw_dim);
        let mut row = 0;
        for d in 0..self.raw_dim {
            if self.angle_dims.contains(&d) {
                jac[(row, d)] = x[d].cos();
                jac[(row + 1, d)] = -x[d].sin();
                row += 2;
            } else {
                jac[(row, d)] = 1.0;
                row += 1;
            }
        }
        jac
    }
}

/// Flat parameter layout, per controller kind:
/// * linear — gain entries row-major (F×A), then bias (F);
/// * RBF — weights row-major (K×F), then centers row-major (K×A) when
///   trainable, then log-lengthscales (A) when trainable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PolicyRepr {
    Linear {
        gain: Vec<Vec<f64>>, // F rows of A
        bias: Vec<f64>,
    },
    Rbf {
        centers: Vec<Vec<f64>>, // K rows of A
        log_lengthscales: Vec<f64>,
        weights: Vec<Vec<f64>>, // K rows of F
        train_centers: bool,
        train_lengthscales: bool,
    },
}

/// A squashed deterministic policy `u = u_max · sat(π̃(aug(x)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub aug: AngleAugment,
    pub max_action: f64,
    pub action_dim: usize,
    pub repr: PolicyRepr,
}

impl Policy {
    /// Pre-squash output π̃ in the augmented space.
    fn raw_output(&self, z: &DVector<f64>) -> DVector<f64> {
        match &self.repr {
            PolicyRepr::Linear { gain, bias } => DVector::from_fn(self.action_dim, |f, _| {
                bias[f] + gain[f].iter().zip(z.iter()).map(|(g, zv)| g * zv).sum::<f64>()
            }),
            PolicyRepr::Rbf { centers, log_lengthscales, weights, .. } => {
                let phi = self.basis(centers, log_lengthscales, z);
                DVector::from_fn(self.action_dim, |f, _| {
                    weights.iter().zip(phi.iter()).map(|(w, p)| w[f] * p).sum()
                })
            }
        }
    }

    fn basis(&self, centers: &[Vec<f64>], log_ls: &[f64], z: &DVector<f64>) -> Vec<f64> {
        centers
            .iter()
            .map(|c| {
                let r2: f64 = c
                    .iter()
                    .zip(z.iter())
                    .zip(log_ls.iter())
                    .map(|((cv, zv), ll)| {
                        let d = (zv - cv) / ll.exp();
                        d * d
                    })
                    .sum();
                (-0.5 * r2).exp()
            })
            .collect()
    }

    pub fn kind_name(&self) -> &'static str {
        match self.repr {
            PolicyRepr::Linear { .. } => "linear",
            PolicyRepr::Rbf { .. } => "rbf",
        }
    }

    pub fn save(&self, path: &std::path::Path) -> crate::Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> crate::Result<Policy> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(file)?)
    }
}

impl Controller for Policy {
    fn state_dim(&self) -> usize {
        self.aug.raw_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn param_count(&self) -> usize {
        match &self.repr {
            PolicyRepr::Linear { gain, bias } => gain.len() * gain[0].len() + bias.len(),
            PolicyRepr::Rbf {
                centers,
                log_lengthscales,
                weights,
                train_centers,
                train_lengthscales,
            } => {
                let mut n = weights.len() * weights[0].len();
                if *train_centers {
                    n += centers.len() * centers[0].len();
                }
                if *train_lengthscales {
                    n += log_lengthscales.len();
                }
                n
            }
        }
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let z = self.aug.apply(x);
        self.raw_output(&z).map(|v| self.max_action * saturate(v))
    }

    fn jacobians(&self, x: &DVector<f64>) -> ControllerJacobians {
        let z = self.aug.apply(x);
        let aug_jac = self.aug.jacobian(x); // A×D
        let raw = self.raw_output(&z);
        let n_theta = self.param_count();
        let f_dim = self.action_dim;
        let a_dim = z.len();

        // dπ̃/dz (F×A) and dπ̃/dθ (F×|θ|)
        let mut draw_dz = DMatrix::zeros(f_dim, a_dim);
        let mut draw_dtheta = DMatrix::zeros(f_dim, n_theta);
        match &self.repr {
            PolicyRepr::Linear { gain, .. } => {
                for f in 0..f_dim {
                    for a in 0..a_dim {
                        draw_dz[(f, a)] = gain[f][a];
                        draw_dtheta[(f, f * a_dim + a)] = z[a];
                    }
                    draw_dtheta[(f, f_dim * a_dim + f)] = 1.0;
                }
            }
            PolicyRepr::Rbf {
                centers,
                log_lengthscales,
                weights,
                train_centers,
                train_lengthscales,
            } => {
                let k_dim = centers.len();
                let phi = self.basis(centers, log_lengthscales, &z);
                let inv_ls2: Vec<f64> =
                    log_lengthscales.iter().map(|ll| (-2.0 * ll).exp()).collect();
                for f in 0..f_dim {
                    for k in 0..k_dim {
                        let wkf = weights[k][f];
                        for a in 0..a_dim {
                            draw_dz[(f, a)] +=
                                wkf * phi[k] * (centers[k][a] - z[a]) * inv_ls2[a];
                        }
                        // weights block: k-major, f-minor
                        draw_dtheta[(f, k * f_dim + f)] = phi[k];
                    }
                }
                let mut offset = k_dim * f_dim;
                if *train_centers {
                    for f in 0..f_dim {
                        for k in 0..k_dim {
                            let wkf = weights[k][f];
                            for a in 0..a_dim {
                                draw_dtheta[(f, offset + k * a_dim + a)] =
                                    wkf * phi[k] * (z[a] - centers[k][a]) * inv_ls2[a];
                            }
                        }
                    }
                    offset += k_dim * a_dim;
                }
                if *train_lengthscales {
                    for f in 0..f_dim {
                        for a in 0..a_dim {
                            let mut g = 0.0;
                            for k in 0..k_dim {
                                let diff = z[a] - centers[k][a];
                                g += weights[k][f] * phi[k] * diff * diff * inv_ls2[a];
                            }
                            draw_dtheta[(f, offset + a)] = g;
                        }
                    }
                }
            }
        }

        // chain through the squashing and the augmentation
        let mut du_dtheta = draw_dtheta;
        let mut draw_dz_scaled = draw_dz;
        for f in 0..f_dim {
            let scale = self.max_action * saturate_deriv(raw[f]);
            for c in 0..n_theta {
                du_dtheta[(f, c)] *= scale;
            }
            for a in 0..a_dim {
                draw_dz_scaled[(f, a)] *= scale;
            }
        }
        let du_dx = draw_dz_scaled * aug_jac;
        ControllerJacobians { du_dx, du_dtheta }
    }

    fn params(&self) -> DVector<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        match &self.repr {
            PolicyRepr::Linear { gain, bias } => {
                for row in gain {
                    p.extend_from_slice(row);
                }
                p.extend_from_slice(bias);
            }
            PolicyRepr::Rbf {
                centers,
                log_lengthscales,
                weights,
                train_centers,
                train_lengthscales,
            } => {
                for row in weights {
                    p.extend_from_slice(row);
                }
                if *train_centers {
                    for row in centers {
                        p.extend_from_slice(row);
                    }
                }
                if *train_lengthscales {
                    p.extend_from_slice(log_lengthscales);
                }
            }
        }
        DVector::from_vec(p)
    }

    fn set_params(&mut self, params: &DVector<f64>) {
        assert_eq!(params.len(), self.param_count(), "parameter count mismatch");
        let mut it = params.iter().copied();
        match &mut self.repr {
            PolicyRepr::Linear { gain, bias } => {
                for row in gain.iter_mut() {
                    for v in row.iter_mut() {
                        *v = it.next().unwrap();
                    }
                }
                for v in bias.iter_mut() {
                    *v = it.next().unwrap();
                }
            }
            PolicyRepr::Rbf {
                centers,
                log_lengthscales,
                weights,
                train_centers,
                train_lengthscales,
            } => {
                for row in weights.iter_mut() {
                    for v in row.iter_mut() {
                        *v = it.next().unwrap();
                    }
                }
                if *train_centers {
                    for row in centers.iter_mut() {
                        for v in row.iter_mut() {
                            *v = it.next().unwrap();
                        }
                    }
                }
                if *train_lengthscales {
                    for v in log_lengthscales.iter_mut() {
                        *v = it.next().unwrap();
                    }
                }
            }
        }
    }
}

/// Everything `policy_init` needs to know about the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyInitSpec {
    pub raw_dim: usize,
    pub angle_dims: Vec<usize>,
    pub action_dim: usize,
    pub max_action: f64,
    /// Initial-state region (mean and std) half the centers come from.
    pub init_mean: Vec<f64>,
    pub init_std: Vec<f64>,
    /// Plausible operating ranges per raw dimension for the other half.
    pub state_low: Vec<f64>,
    pub state_high: Vec<f64>,
    pub centers: usize,
    pub weight_std: f64,
    pub train_centers: bool,
    pub train_lengthscales: bool,
}

/// Initialize a linear policy with small random gains.
pub fn init_linear(spec: &PolicyInitSpec, rng: &CounterRng) -> Policy {
    let aug = AngleAugment { raw_dim: spec.raw_dim, angle_dims: spec.angle_dims.clone() };
    let a_dim = aug.augmented_dim();
    let gain = (0..spec.action_dim)
        .map(|f| {
            (0..a_dim)
                .map(|a| {
                    spec.weight_std
                        * rng.normal(&[domain::POLICY_INIT, 0, f as u64, a as u64])
                })
                .collect()
        })
        .collect();
    Policy {
        aug,
        max_action: spec.max_action,
        action_dim: spec.action_dim,
        repr: PolicyRepr::Linear { gain, bias: vec![0.0; spec.action_dim] },
    }
}

/// Initialize an RBF policy. Centers alternate between draws from the
/// initial-state region and uniform draws over the operating ranges;
/// weights are N(0, weight_std²); lengthscales start at range/5 per
/// augmented dimension.
pub fn init_rbf(spec: &PolicyInitSpec, rng: &CounterRng) -> Policy {
    let aug = AngleAugment { raw_dim: spec.raw_dim, angle_dims: spec.angle_dims.clone() };
    let a_dim = aug.augmented_dim();
    let mut centers = Vec::with_capacity(spec.centers);
    for k in 0..spec.centers {
        let raw = DVector::from_fn(spec.raw_dim, |d, _| {
            if k % 2 == 0 {
                spec.init_mean[d]
                    + spec.init_std[d]
                        * rng.normal(&[domain::POLICY_INIT, 1, k as u64, d as u64])
            } else {
                rng.uniform_in(
                    &[domain::POLICY_INIT, 2, k as u64, d as u64],
                    spec.state_low[d],
                    spec.state_high[d],
                )
            }
        });
        centers.push(aug.apply(&raw).iter().copied().collect::<Vec<f64>>());
    }
    let weights = (0..spec.centers)
        .map(|k| {
            (0..spec.action_dim)
                .map(|f| {
                    spec.weight_std
                        * rng.normal(&[domain::POLICY_INIT, 3, k as u64, f as u64])
                })
                .collect()
        })
        .collect();
    // per augmented dim: range/5 (trig pairs span [-1,1])
    let mut log_ls = Vec::with_capacity(a_dim);
    for d in 0..spec.raw_dim {
        if spec.angle_dims.contains(&d) {
            log_ls.push((2.0_f64 / 5.0).ln());
            log_ls.push((2.0_f64 / 5.0).ln());
        } else {
            let range = (spec.state_high[d] - spec.state_low[d]).max(1e-6);
            log_ls.push((range / 5.0).ln());
        }
    }
    Policy {
        aug,
        max_action: spec.max_action,
        action_dim: spec.action_dim,
        repr: PolicyRepr::Rbf {
            centers,
            log_lengthscales: log_ls,
            weights,
            train_centers: spec.train_centers,
            train_lengthscales: spec.train_lengthscales,
        },
    }
}

/// Dispatch on the configured kind.
pub fn policy_init(kind: &str, spec: &PolicyInitSpec, rng: &CounterRng) -> crate::Result<Policy> {
    match kind {
        "linear" => Ok(init_linear(spec, rng)),
        "rbf" => Ok(init_rbf(spec, rng)),
        other => Err(crate::Error::Config(format!("unknown policy kind '{other}'"))),
    }
}
