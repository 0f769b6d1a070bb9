//! Ground-truth cart-pole simulator.
//!
//! A cart of mass `M` slides on a rail with viscous friction `b`; a uniform
//! rod of mass `m` and length `L` is hinged to it. The state is
//! `(s, β, ṡ, β̇)` with `β = 0` the upright position and `β = π` hanging
//! down. The angle is kept unwrapped; trig is applied at use sites.
//!
//! Equations of motion (rod pivoting at the cart, COM at L/2):
//!
//! ```text
//! s̈ = [4(F − b ṡ) + 2 m L β̇² sin β − 3 m g sin β cos β] / [4(M+m) − 3 m cos²β]
//! β̈ = (3 / 2L) (g sin β − s̈ cos β)
//! ```

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::rng::{domain, CounterRng};
use crate::rollout::CostFunction;

pub const STATE_DIM: usize = 4;

/// Cart position (m), pole angle (rad, 0 = upright), cart velocity (m/s),
/// angular velocity (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPoleState {
    pub pos: f64,
    pub angle: f64,
    pub vel: f64,
    pub angvel: f64,
}

impl CartPoleState {
    pub fn new(pos: f64, angle: f64, vel: f64, angvel: f64) -> Self {
        let s = CartPoleState { pos, angle, vel, angvel };
        assert!(s.is_finite(), "non-finite cart-pole state");
        s
    }

    pub fn is_finite(&self) -> bool {
        self.pos.is_finite()
            && self.angle.is_finite()
            && self.vel.is_finite()
            && self.angvel.is_finite()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.pos, self.angle, self.vel, self.angvel])
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), STATE_DIM, "cart-pole state has 4 dimensions");
        CartPoleState::new(v[0], v[1], v[2], v[3])
    }
}

/// Physical parameters. Defaults are the common benchmark values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_length: f64,
    pub friction: f64,
    pub gravity: f64,
    pub max_force: f64,
    /// Internal integration step (s).
    pub dt: f64,
    /// RK4 substeps per control period.
    pub substeps: usize,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        CartPoleParams {
            cart_mass: 0.5,
            pole_mass: 0.5,
            pole_length: 0.6,
            friction: 0.1,
            gravity: 9.82,
            max_force: 10.0,
            dt: 0.02,
            substeps: 5,
        }
    }
}

impl CartPoleParams {
    /// Control period implied by `dt` and `substeps`.
    pub fn control_period(&self) -> f64 {
        self.dt * self.substeps as f64
    }

    fn accel(&self, st: &CartPoleState, force: f64) -> (f64, f64) {
        let (m, mc, l, b, g) =
            (self.pole_mass, self.cart_mass, self.pole_length, self.friction, self.gravity);
        let (sin_b, cos_b) = st.angle.sin_cos();
        let denom = 4.0 * (mc + m) - 3.0 * m * cos_b * cos_b;
        let s_acc = (4.0 * (force - b * st.vel) + 2.0 * m * l * st.angvel * st.angvel * sin_b
            - 3.0 * m * g * sin_b * cos_b)
            / denom;
        let b_acc = 1.5 / l * (g * sin_b - s_acc * cos_b);
        (s_acc, b_acc)
    }

    fn deriv(&self, st: &CartPoleState, force: f64) -> [f64; 4] {
        let (s_acc, b_acc) = self.accel(st, force);
        [st.vel, st.angvel, s_acc, b_acc]
    }

    /// One RK4 step over `dt` with zero-order-hold force.
    pub fn step_dynamics(&self, st: &CartPoleState, force: f64, dt: f64) -> CartPoleState {
        assert!(dt > 0.0, "dt must be positive");
        assert!(force.abs() <= self.max_force * (1.0 + 1e-9), "force exceeds saturation bound");
        assert!(st.is_finite(), "non-finite cart-pole state");
        let shift = |s: &CartPoleState, k: &[f64; 4], h: f64| {
            CartPoleState {
                pos: s.pos + h * k[0],
                angle: s.angle + h * k[1],
                vel: s.vel + h * k[2],
                angvel: s.angvel + h * k[3],
            }
        };
        let k1 = self.deriv(st, force);
        let k2 = self.deriv(&shift(st, &k1, dt / 2.0), force);
        let k3 = self.deriv(&shift(st, &k2, dt / 2.0), force);
        let k4 = self.deriv(&shift(st, &k3, dt), force);
        CartPoleState {
            pos: st.pos + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            angle: st.angle + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
            vel: st.vel + dt / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
            angvel: st.angvel + dt / 6.0 * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3]),
        }
    }

    /// Advance one control period (`substeps` RK4 steps of `dt` each).
    pub fn control_step(&self, st: &CartPoleState, force: f64) -> CartPoleState {
        let mut cur = *st;
        for _ in 0..self.substeps {
            cur = self.step_dynamics(&cur, force, self.dt);
        }
        cur
    }

    /// Total mechanical energy (used by the conservation check).
    pub fn energy(&self, st: &CartPoleState) -> f64 {
        let (m, mc, l, g) = (self.pole_mass, self.cart_mass, self.pole_length, self.gravity);
        let ke_cart = 0.5 * mc * st.vel * st.vel;
        // rod: KE = ½m ṡ² + ½ m L ṡ β̇ cos β + ⅙ m L² β̇²
        let ke_pole = 0.5 * m * st.vel * st.vel
            + 0.5 * m * l * st.vel * st.angvel * st.angle.cos()
            + m * l * l * st.angvel * st.angvel / 6.0;
        let pe = m * g * (l / 2.0) * st.angle.cos();
        ke_cart + ke_pole + pe
    }
}

/// Elementwise bounded squashing, differentiable everywhere:
/// `sat(u) = (9 sin u + sin 3u) / 8 ∈ [−1, 1]`.
pub fn saturate(u: f64) -> f64 {
    (9.0 * u.sin() + (3.0 * u).sin()) / 8.0
}

/// Derivative of [`saturate`].
pub fn saturate_deriv(u: f64) -> f64 {
    (9.0 * u.cos() + 3.0 * (3.0 * u).cos()) / 8.0
}

/// Per-dimension observation noise, `σ² = k·σ²_base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Base standard deviations per state dimension.
    pub base_std: Vec<f64>,
    /// Variance multiplier `k ≥ 0`.
    pub multiplier: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            base_std: vec![
                0.01,
                1.0_f64.to_radians(),
                0.1,
                10.0_f64.to_radians(),
            ],
            multiplier: 1.0,
        }
    }
}

impl NoiseConfig {
    /// Effective standard deviation per dimension: `√k · σ_base`.
    pub fn std(&self, dim: usize) -> f64 {
        assert!(self.multiplier >= 0.0, "noise multiplier must be >= 0");
        self.multiplier.sqrt() * self.base_std[dim]
    }
}

/// Add independent Gaussian observation noise. Draws are keyed by
/// `(trial, step, dim)` so each trial has its own stream.
pub fn observe(
    state: &CartPoleState,
    noise: &NoiseConfig,
    rng: &CounterRng,
    trial: u64,
    step: u64,
) -> CartPoleState {
    let v = state.to_vector();
    let mut out = [0.0; STATE_DIM];
    for d in 0..STATE_DIM {
        out[d] = v[d] + noise.std(d) * rng.normal(&[domain::OBSERVE, trial, step, d as u64]);
    }
    CartPoleState::from_slice(&out)
}

/// Which saturating cost shapes the task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostVariant {
    /// `1 − exp(−(s² + β²))` on the raw coordinates: there is exactly one
    /// correct direction to swing up.
    Angle,
    /// `1 − exp(−d²/ℓ²)` on the distance between the pendulum tip and the
    /// balanced tip position; symmetric in the swing-up direction.
    Tip,
}

/// Saturating cost of the form `1 − exp(−quadratic)`, bounded in [0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostConfig {
    pub variant: CostVariant,
    /// Diagonal weights on `(s, β, ṡ, β̇)` for the angle variant.
    pub weights: Vec<f64>,
    /// Target state for the angle variant.
    pub target: Vec<f64>,
    /// Pendulum length used for the tip position (m).
    pub pole_length: f64,
    /// Length-scale dividing the squared tip distance (m).
    pub tip_lengthscale: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            variant: CostVariant::Angle,
            weights: vec![1.0, 1.0, 0.0, 0.0],
            target: vec![0.0; 4],
            pole_length: 0.6,
            tip_lengthscale: 0.25,
        }
    }
}

impl CostConfig {
    fn tip_sq_dist(&self, state: &[f64]) -> f64 {
        let l = self.pole_length;
        let (s, beta) = (state[0], state[1]);
        let dx = s + l * beta.sin();
        let dy = l * beta.cos() - l;
        dx * dx + dy * dy
    }

    /// Cost in [0, 1).
    pub fn cost(&self, state: &[f64]) -> f64 {
        assert_eq!(state.len(), STATE_DIM);
        match self.variant {
            CostVariant::Angle => {
                let q: f64 = (0..STATE_DIM)
                    .map(|d| {
                        let e = state[d] - self.target[d];
                        self.weights[d] * e * e
                    })
                    .sum();
                1.0 - (-q).exp()
            }
            CostVariant::Tip => {
                let q = self.tip_sq_dist(state) / (self.tip_lengthscale * self.tip_lengthscale);
                1.0 - (-q).exp()
            }
        }
    }

    /// Gradient of [`CostConfig::cost`] w.r.t. the state.
    pub fn cost_grad(&self, state: &[f64]) -> DVector<f64> {
        assert_eq!(state.len(), STATE_DIM);
        match self.variant {
            CostVariant::Angle => {
                let q: f64 = (0..STATE_DIM)
                    .map(|d| {
                        let e = state[d] - self.target[d];
                        self.weights[d] * e * e
                    })
                    .sum();
                let expq = (-q).exp();
                DVector::from_fn(STATE_DIM, |d, _| {
                    2.0 * self.weights[d] * (state[d] - self.target[d]) * expq
                })
            }
            CostVariant::Tip => {
                let l = self.pole_length;
                let ls2 = self.tip_lengthscale * self.tip_lengthscale;
                let (s, beta) = (state[0], state[1]);
                let dx = s + l * beta.sin();
                let dy = l * beta.cos() - l;
                let expq = (-(dx * dx + dy * dy) / ls2).exp();
                let mut g = DVector::zeros(STATE_DIM);
                g[0] = 2.0 * dx / ls2 * expq;
                g[1] = 2.0 * (dx * l * beta.cos() - dy * l * beta.sin()) / ls2 * expq;
                g
            }
        }
    }
}

impl CostFunction for CostConfig {
    fn cost(&self, x: &DVector<f64>) -> f64 {
        CostConfig::cost(self, x.as_slice())
    }

    fn cost_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        CostConfig::cost_grad(self, x.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hanging_down_is_a_fixed_point() {
        let p = CartPoleParams::default();
        let st = CartPoleState::new(0.0, std::f64::consts::PI, 0.0, 0.0);
        let next = p.step_dynamics(&st, 0.0, 0.02);
        assert!((next.pos - st.pos).abs() < 1e-14);
        assert!((next.angle - st.angle).abs() < 1e-14);
        assert!((next.vel).abs() < 1e-14);
        assert!((next.angvel).abs() < 1e-14);
    }

    #[test]
    fn upright_is_unstable() {
        let p = CartPoleParams::default();
        let exact = CartPoleState::new(0.0, 0.0, 0.0, 0.0);
        let next = p.step_dynamics(&exact, 0.0, 0.02);
        assert_eq!(next.angvel, 0.0);

        let mut perturbed = CartPoleState::new(0.0, 0.01, 0.0, 0.0);
        for _ in 0..100 {
            perturbed = p.step_dynamics(&perturbed, 0.0, 0.02);
        }
        assert!(perturbed.angle > 0.1, "perturbation should grow, got {}", perturbed.angle);
    }

    #[test]
    fn undriven_frictionless_energy_is_conserved() {
        let p = CartPoleParams { friction: 0.0, ..CartPoleParams::default() };
        let mut st = CartPoleState::new(0.1, 2.0, 0.3, 1.0);
        let e0 = p.energy(&st);
        for _ in 0..50 {
            st = p.step_dynamics(&st, 0.0, 0.02);
        }
        let e1 = p.energy(&st);
        assert!(((e1 - e0) / e0.abs()).abs() < 1e-6, "energy drift {e0} -> {e1}");
    }

    #[test]
    fn step_dynamics_is_bit_deterministic() {
        let p = CartPoleParams::default();
        let st = CartPoleState::new(0.2, 1.1, -0.4, 2.5);
        let a = p.step_dynamics(&st, 3.0, 0.02);
        let b = p.step_dynamics(&st, 3.0, 0.02);
        assert_eq!(a.pos.to_bits(), b.pos.to_bits());
        assert_eq!(a.angle.to_bits(), b.angle.to_bits());
        assert_eq!(a.vel.to_bits(), b.vel.to_bits());
        assert_eq!(a.angvel.to_bits(), b.angvel.to_bits());
    }

    #[test]
    fn zero_noise_observation_is_identity() {
        let rng = CounterRng::new(1);
        let noise = NoiseConfig { multiplier: 0.0, ..NoiseConfig::default() };
        let st = CartPoleState::new(0.3, 2.0, -1.0, 0.5);
        let obs = observe(&st, &noise, &rng, 0, 0);
        assert_eq!(obs, st);
    }

    #[test]
    fn base_noise_levels_match_configured_stds() {
        let rng = CounterRng::new(9);
        let noise = NoiseConfig::default();
        let st = CartPoleState::new(0.0, 0.0, 0.0, 0.0);
        let n = 100_000;
        let mut sum = [0.0; 4];
        let mut sumsq = [0.0; 4];
        for i in 0..n {
            let o = observe(&st, &noise, &rng, 7, i);
            let v = o.to_vector();
            for d in 0..4 {
                sum[d] += v[d];
                sumsq[d] += v[d] * v[d];
            }
        }
        for d in 0..4 {
            let mean = sum[d] / n as f64;
            let std = (sumsq[d] / n as f64 - mean * mean).sqrt();
            let expect = noise.base_std[d];
            assert!(
                (std - expect).abs() / expect < 0.02,
                "dim {d}: sample std {std} vs base {expect}"
            );
        }
    }

    #[test]
    fn quadrupled_variance_doubles_every_std() {
        let n1 = NoiseConfig { multiplier: 1.0, ..NoiseConfig::default() };
        let n4 = NoiseConfig { multiplier: 4.0, ..NoiseConfig::default() };
        for d in 0..4 {
            assert!((n4.std(d) - 2.0 * n1.std(d)).abs() < 1e-15);
        }
    }

    #[test]
    fn saturation_shape() {
        assert_eq!(saturate(0.0), 0.0);
        assert!((saturate(std::f64::consts::FRAC_PI_2) - 1.0).abs() < 1e-15);
        // scan for the global max of |sat|
        let mut max = 0.0_f64;
        let mut u = -std::f64::consts::PI;
        while u <= std::f64::consts::PI {
            max = max.max(saturate(u).abs());
            u += 1e-4;
        }
        assert!(max <= 1.0 + 1e-12, "|sat| exceeded 1: {max}");
        assert!(max > 1.0 - 1e-6, "max |sat| should reach 1: {max}");
    }

    #[test]
    fn saturation_derivative_matches_finite_differences() {
        let h = 1e-6;
        let mut u = -3.0;
        while u <= 3.0 {
            let fd = (saturate(u + h) - saturate(u - h)) / (2.0 * h);
            assert!((fd - saturate_deriv(u)).abs() < 1e-8);
            u += 0.1;
        }
    }

    #[test]
    fn cost_zero_at_target_and_bounded() {
        let angle = CostConfig::default();
        assert_eq!(CostConfig::cost(&angle, &[0.0, 0.0, 0.0, 0.0]), 0.0);
        let tip = CostConfig { variant: CostVariant::Tip, ..CostConfig::default() };
        assert_eq!(CostConfig::cost(&tip, &[0.0, 0.0, 0.0, 0.0]), 0.0);
        let rng = CounterRng::new(5);
        for i in 0..1000u64 {
            let st = [
                3.0 * rng.normal(&[i, 0]),
                3.0 * rng.normal(&[i, 1]),
                3.0 * rng.normal(&[i, 2]),
                3.0 * rng.normal(&[i, 3]),
            ];
            for cfg in [&angle, &tip] {
                let c = CostConfig::cost(cfg, &st);
                assert!((0.0..1.0).contains(&c), "cost out of range: {c}");
            }
        }
    }

    #[test]
    fn angle_cost_unit_offset() {
        let cfg = CostConfig::default();
        let c = CostConfig::cost(&cfg, &[1.0, 0.0, 0.0, 0.0]);
        assert!((c - (1.0 - (-1.0_f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn tip_cost_is_periodic_angle_cost_is_not() {
        let tip = CostConfig { variant: CostVariant::Tip, ..CostConfig::default() };
        let angle = CostConfig::default();
        let beta = 1.3;
        let st = [0.4, beta, 0.0, 0.0];
        let wrapped = [0.4, beta + std::f64::consts::TAU, 0.0, 0.0];
        assert!((CostConfig::cost(&tip, &st) - CostConfig::cost(&tip, &wrapped)).abs() < 1e-12);
        let mirrored = [0.4, std::f64::consts::TAU - beta, 0.0, 0.0];
        assert!(
            (CostConfig::cost(&angle, &st) - CostConfig::cost(&angle, &mirrored)).abs() > 1e-3,
            "angle cost should be directional"
        );
    }

    #[test]
    fn tip_cost_left_right_symmetry() {
        let tip = CostConfig { variant: CostVariant::Tip, ..CostConfig::default() };
        for beta in [0.3, 1.0, 2.5] {
            let a = CostConfig::cost(&tip, &[0.0, beta, 0.0, 0.0]);
            let b = CostConfig::cost(&tip, &[0.0, -beta, 0.0, 0.0]);
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn cost_gradients_match_finite_differences() {
        let angle = CostConfig::default();
        let tip = CostConfig { variant: CostVariant::Tip, ..CostConfig::default() };
        let rng = CounterRng::new(17);
        let h = 1e-6;
        for i in 0..200u64 {
            let st = [
                rng.normal(&[i, 0]),
                2.0 * rng.normal(&[i, 1]),
                rng.normal(&[i, 2]),
                rng.normal(&[i, 3]),
            ];
            for cfg in [&angle, &tip] {
                let g = CostConfig::cost_grad(cfg, &st);
                for d in 0..4 {
                    let mut up = st;
                    let mut dn = st;
                    up[d] += h;
                    dn[d] -= h;
                    let fd = (CostConfig::cost(cfg, &up) - CostConfig::cost(cfg, &dn)) / (2.0 * h);
                    let denom = fd.abs().max(g[d].abs()).max(1e-6);
                    assert!(
                        (fd - g[d]).abs() / denom < 1e-6,
                        "dim {d}: fd {fd} vs analytic {}",
                        g[d]
                    );
                }
            }
        }
    }
}
