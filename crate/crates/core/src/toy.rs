//! Small analytic problems with closed-form gradients.
//!
//! These exercise the exact rollout and estimator code paths the learned
//! models use, but are simple enough that `dJ/dθ` can be derived by hand;
//! the test suites compare every estimator against those values.

use nalgebra::{DMatrix, DVector};

use crate::rollout::{
    Controller, ControllerJacobians, CostFunction, DistJacobians, DistParams, DynamicsModel,
};

/// Linear-Gaussian dynamics `x' ~ N(A x + B u, diag(σ²))`, optionally with
/// a separate model-uncertainty component for the ablation paths.
#[derive(Debug, Clone)]
pub struct LinearGaussianDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub var_model: DVector<f64>,
    pub var_noise: DVector<f64>,
}

impl LinearGaussianDynamics {
    /// Scalar chain `x' ~ N(a x + b u, σ²)` with all variance treated as noise.
    pub fn scalar(a: f64, b: f64, sigma: f64) -> Self {
        LinearGaussianDynamics {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            var_model: DVector::zeros(1),
            var_noise: DVector::from_element(1, sigma * sigma),
        }
    }

    /// Scalar chain with an explicit split between model and noise variance.
    pub fn with_model_var(a: f64, b: f64, var_model: f64, var_noise: f64) -> Self {
        LinearGaussianDynamics {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            var_model: DVector::from_element(1, var_model),
            var_noise: DVector::from_element(1, var_noise),
        }
    }
}

impl DynamicsModel for LinearGaussianDynamics {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DistParams {
        DistParams {
            mean: &self.a * x + &self.b * u,
            var_model: self.var_model.clone(),
            var_noise: self.var_noise.clone(),
        }
    }

    fn predict_with_grads(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DistParams, DistJacobians) {
        let d = self.state_dim();
        let f = self.action_dim();
        let jac = DistJacobians {
            dmean_dx: self.a.clone(),
            dmean_du: self.b.clone(),
            dvar_model_dx: DMatrix::zeros(d, d),
            dvar_model_du: DMatrix::zeros(d, f),
        };
        (self.predict(x, u), jac)
    }
}

/// State-independent controller `u = θ`; `du/dθ = I`.
#[derive(Debug, Clone)]
pub struct BiasController {
    state_dim: usize,
    pub bias: DVector<f64>,
}

impl BiasController {
    pub fn new(state_dim: usize, bias: DVector<f64>) -> Self {
        BiasController { state_dim, bias }
    }
}

impl Controller for BiasController {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.bias.len()
    }

    fn param_count(&self) -> usize {
        self.bias.len()
    }

    fn eval(&self, _x: &DVector<f64>) -> DVector<f64> {
        self.bias.clone()
    }

    fn jacobians(&self, _x: &DVector<f64>) -> ControllerJacobians {
        let f = self.bias.len();
        ControllerJacobians {
            du_dx: DMatrix::zeros(f, self.state_dim),
            du_dtheta: DMatrix::identity(f, f),
        }
    }

    fn params(&self) -> DVector<f64> {
        self.bias.clone()
    }

    fn set_params(&mut self, params: &DVector<f64>) {
        assert_eq!(params.len(), self.bias.len());
        self.bias = params.clone();
    }
}

/// Linear state feedback `u = K x + b` without squashing.
#[derive(Debug, Clone)]
pub struct LinearFeedbackController {
    pub gain: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Controller for LinearFeedbackController {
    fn state_dim(&self) -> usize {
        self.gain.ncols()
    }

    fn action_dim(&self) -> usize {
        self.gain.nrows()
    }

    fn param_count(&self) -> usize {
        self.gain.len() + self.bias.len()
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.gain * x + &self.bias
    }

    fn jacobians(&self, x: &DVector<f64>) -> ControllerJacobians {
        let (f, d) = (self.gain.nrows(), self.gain.ncols());
        let mut du_dtheta = DMatrix::zeros(f, self.param_count());
        // row-major gain entries first, then the bias
        for r in 0..f {
            for c in 0..d {
                du_dtheta[(r, r * d + c)] = x[c];
            }
            du_dtheta[(r, f * d + r)] = 1.0;
        }
        ControllerJacobians { du_dx: self.gain.clone(), du_dtheta }
    }

    fn params(&self) -> DVector<f64> {
        let (f, d) = (self.gain.nrows(), self.gain.ncols());
        let mut p = DVector::zeros(self.param_count());
        for r in 0..f {
            for c in 0..d {
                p[r * d + c] = self.gain[(r, c)];
            }
        }
        for r in 0..f {
            p[f * d + r] = self.bias[r];
        }
        p
    }

    fn set_params(&mut self, params: &DVector<f64>) {
        assert_eq!(params.len(), self.param_count());
        let (f, d) = (self.gain.nrows(), self.gain.ncols());
        for r in 0..f {
            for c in 0..d {
                self.gain[(r, c)] = params[r * d + c];
            }
        }
        for r in 0..f {
            self.bias[r] = params[f * d + r];
        }
    }
}

/// Quadratic cost `c(x) = Σ x²`.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticCost;

impl CostFunction for QuadraticCost {
    fn cost(&self, x: &DVector<f64>) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    fn cost_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        2.0 * x
    }
}

/// Quadratic cost shifted by a constant: `c(x) = Σ x² + offset`. Constant
/// shifts must not change baselined likelihood-ratio gradients.
#[derive(Debug, Clone, Copy)]
pub struct ShiftedQuadraticCost {
    pub offset: f64,
}

impl CostFunction for ShiftedQuadraticCost {
    fn cost(&self, x: &DVector<f64>) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>() + self.offset
    }

    fn cost_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        2.0 * x
    }
}

/// Closed-form `dJ/dθ` for the scalar chain `x_{t+1} ~ N(a x_t + b θ, σ²)`,
/// `x_0 = 0`, `c(x) = x²`, over `T` transitions:
/// from `E[x_t] = bθ(1 + a + … + a^{t-1})` and variance independent of θ,
/// `dJ/dθ = Σ_t 2 b² θ (Σ_{k<t} a^k)²`.
pub fn linear_chain_analytic_grad(a: f64, b: f64, theta: f64, horizon: usize) -> f64 {
    let mut grad = 0.0;
    for t in 1..=horizon {
        let geo: f64 = (0..t).map(|k| a.powi(k as i32)).sum();
        grad += 2.0 * b * b * theta * geo * geo;
    }
    grad
}
