//! A parametric scalar control problem covering the reference toys.
//!
//! ```text
//! b = b_u·u + a·x + b_sin·sin x        σ = σ₀ + σ_u·u + σ_x·x
//! f = e^{-λ(s-t)}(w·u² + κ·x + ½ξ·x²) + γ·y + ½ζ·z²
//! h = c·e^{-λ(T-t)}·x
//! ```

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ControlProblem;
use crate::grid::PathRole;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalarToy {
    pub controls: Vec<f64>,
    pub t0: f64,
    pub t1: f64,
    pub x0: f64,
    pub b_u: f64,
    pub a: f64,
    pub b_sin: f64,
    pub sigma0: f64,
    pub sigma_u: f64,
    pub sigma_x: f64,
    pub lambda: f64,
    pub w: f64,
    pub kappa: f64,
    pub xi: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub c: f64,
}

impl Default for ScalarToy {
    fn default() -> Self {
        Self {
            controls: vec![-1.0, 0.0, 1.0],
            t0: 0.0,
            t1: 1.0,
            x0: 0.0,
            b_u: 0.0,
            a: 0.0,
            b_sin: 0.0,
            sigma0: 0.0,
            sigma_u: 0.0,
            sigma_x: 0.0,
            lambda: 0.0,
            w: 0.0,
            kappa: 0.0,
            xi: 0.0,
            gamma: 0.0,
            zeta: 0.0,
            c: 0.0,
        }
    }
}

impl ScalarToy {
    /// `b = u`, `σ ≡ 1`, `f = u²`, `h ≡ 0`, `U = {-1, 0, 1}` on `[0, 1]`.
    pub fn quadratic() -> Self {
        Self {
            b_u: 1.0,
            sigma0: 1.0,
            w: 1.0,
            ..Self::default()
        }
    }

    /// `b = a·x`, `σ ≡ 0`, `f ≡ 0`, `h = x`: `p(t,s) = e^{a(T-s)}`.
    pub fn linear_state(a: f64) -> Self {
        Self {
            controls: vec![0.0],
            x0: 1.0,
            a,
            c: 1.0,
            ..Self::default()
        }
    }

    /// `b = u`, `σ ≡ 1`, `f = e^{-λ(s-t)}(u² + κx)`, `h = c·e^{-λ(T-t)}x`.
    pub fn discounted(lambda: f64, kappa: f64, c: f64) -> Self {
        Self {
            b_u: 1.0,
            sigma0: 1.0,
            lambda,
            w: 1.0,
            kappa,
            c,
            ..Self::default()
        }
    }

    /// `b = u + ½ sin x`, `σ = u`, `f = e^{-(s-t)}u² + ½y`, `h ≡ 0`, `x₀ = ½`, `U = {0, 1}`.
    pub fn variational() -> Self {
        Self {
            controls: vec![0.0, 1.0],
            x0: 0.5,
            b_u: 1.0,
            b_sin: 0.5,
            sigma_u: 1.0,
            lambda: 1.0,
            w: 1.0,
            gamma: 0.5,
            ..Self::default()
        }
    }

    /// The same problem with `(h, f)` multiplied by `k`.
    pub fn scaled_cost(&self, k: f64) -> Self {
        Self {
            w: self.w * k,
            kappa: self.kappa * k,
            xi: self.xi * k,
            zeta: self.zeta * k,
            c: self.c * k,
            ..self.clone()
        }
    }

    /// `p(s,s)` of the discounted toy.
    pub fn discounted_p_diag(&self, s: f64) -> f64 {
        let e = (-self.lambda * (self.t1 - s)).exp();
        if self.lambda == 0.0 {
            self.c + self.kappa * (self.t1 - s)
        } else {
            self.c * e + self.kappa * (1.0 - e) / self.lambda
        }
    }

    fn disc(&self, t: f64, s: f64) -> f64 {
        (-self.lambda * (s - t)).exp()
    }
}

impl ControlProblem for ScalarToy {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_set(&self) -> &[f64] {
        &self.controls
    }
    fn horizon(&self) -> (f64, f64) {
        (self.t0, self.t1)
    }
    fn initial_state(&self, _: PathRole, _: usize, out: &mut [f64]) {
        out[0] = self.x0;
    }
    fn lipschitz(&self) -> f64 {
        (self.a.abs() + self.b_sin.abs() + self.sigma_x.abs() + self.gamma.abs()).max(1.0)
    }

    fn drift(&self, _: f64, u: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.b_u * u + self.a * x[0] + self.b_sin * x[0].sin();
    }
    fn drift_x(&self, _: f64, _: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.a + self.b_sin * x[0].cos();
    }
    fn drift_xx(&self, _: f64, _: f64, x: &[f64], out: &mut [f64]) {
        out[0] = -self.b_sin * x[0].sin();
    }

    fn diffusion(&self, _: f64, u: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.sigma0 + self.sigma_u * u + self.sigma_x * x[0];
    }
    fn diffusion_x(&self, _: f64, _: f64, _: &[f64], out: &mut [f64]) {
        out[0] = self.sigma_x;
    }
    fn diffusion_xx(&self, _: f64, _: f64, _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn running_cost(&self, t: f64, s: f64, u: f64, x: &[f64], y: f64, z: f64) -> f64 {
        let x = x[0];
        self.disc(t, s) * (self.w * u * u + self.kappa * x + 0.5 * self.xi * x * x)
            + self.gamma * y
            + 0.5 * self.zeta * z * z
    }
    fn running_cost_grad(
        &self,
        t: f64,
        s: f64,
        _: f64,
        x: &[f64],
        _: f64,
        z: f64,
        out: &mut [f64],
    ) {
        out[0] = self.disc(t, s) * (self.kappa + self.xi * x[0]);
        out[1] = self.gamma;
        out[2] = self.zeta * z;
    }
    fn running_cost_hess(
        &self,
        t: f64,
        s: f64,
        _: f64,
        _: &[f64],
        _: f64,
        _: f64,
        out: &mut [f64],
    ) {
        out.fill(0.0);
        out[0] = self.disc(t, s) * self.xi;
        out[8] = self.zeta;
    }
    fn running_cost_dt(&self, t: f64, s: f64, u: f64, x: &[f64], _: f64, _: f64) -> f64 {
        let x = x[0];
        self.lambda * self.disc(t, s) * (self.w * u * u + self.kappa * x + 0.5 * self.xi * x * x)
    }
    fn running_cost_grad_dt(
        &self,
        t: f64,
        s: f64,
        _: f64,
        x: &[f64],
        _: f64,
        _: f64,
        out: &mut [f64],
    ) {
        out[0] = self.lambda * self.disc(t, s) * (self.kappa + self.xi * x[0]);
        out[1] = 0.0;
        out[2] = 0.0;
    }

    fn terminal_cost(&self, t: f64, x: &[f64]) -> f64 {
        self.c * self.disc(t, self.t1) * x[0]
    }
    fn terminal_cost_x(&self, t: f64, _: &[f64], out: &mut [f64]) {
        out[0] = self.c * self.disc(t, self.t1);
    }
    fn terminal_cost_xx(&self, _: f64, _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn terminal_cost_dt(&self, t: f64, x: &[f64]) -> f64 {
        self.lambda * self.c * self.disc(t, self.t1) * x[0]
    }
    fn terminal_cost_x_dt(&self, t: f64, _: &[f64], out: &mut [f64]) {
        out[0] = self.lambda * self.c * self.disc(t, self.t1);
    }
}

/// A control toy with what is known about it in closed form.
#[derive(Clone)]
pub struct ControlOracle {
    pub name: &'static str,
    pub problem: ScalarToy,
    /// Index of an equilibrium control that is constant in time, if known.
    pub equilibrium: Option<usize>,
    /// `p(s, s)` in closed form.
    pub p_diag: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
}

impl std::fmt::Debug for ControlOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlOracle")
            .field("name", &self.name)
            .finish()
    }
}

impl ControlOracle {
    pub fn quadratic() -> Self {
        Self {
            name: "quadratic toy",
            problem: ScalarToy::quadratic(),
            equilibrium: Some(1),
            p_diag: Some(Arc::new(|_| 0.0)),
        }
    }

    pub fn linear_state(a: f64) -> Self {
        let t1 = ScalarToy::linear_state(a).t1;
        Self {
            name: "linear state",
            problem: ScalarToy::linear_state(a),
            equilibrium: Some(0),
            p_diag: Some(Arc::new(move |s| (a * (t1 - s)).exp())),
        }
    }

    pub fn discounted(lambda: f64, kappa: f64, c: f64) -> Self {
        let toy = ScalarToy::discounted(lambda, kappa, c);
        let t = toy.clone();
        Self {
            name: "discounted toy",
            problem: toy,
            equilibrium: None,
            p_diag: Some(Arc::new(move |s| t.discounted_p_diag(s))),
        }
    }

    pub fn variational() -> Self {
        Self {
            name: "spike-variation toy",
            problem: ScalarToy::variational(),
            equilibrium: None,
            p_diag: Some(Arc::new(|_| 0.0)),
        }
    }
}
