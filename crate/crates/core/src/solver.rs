//! Probability-flow ODE solvers.
//!
//! [`phi`] is the first-order DDIM / DPM-Solver-1 step. [`reference_solve`]
//! is a fixed-step classical Runge-Kutta integrator used as ground truth.
//! It integrates the PF-ODE in the coordinates `y = z / alpha`,
//! `nu = sigma / alpha`, where the ODE reads `dy/dnu = eps(z, t)`; the step
//! grid stays uniform in `t`.

use crate::error::{Error, Result};
use crate::prior::{Condition, EpsilonModel};
use crate::{Matrix, Vector};

/// A value together with its Jacobian with respect to some upstream input
/// (the rendered view `z_0` in the losses).
#[derive(Debug, Clone, PartialEq)]
pub struct Tangent {
    pub value: Vector,
    pub jacobian: Matrix,
}

impl Tangent {
    /// `value` depending on the input through `scale * I`.
    pub fn scaled_identity(value: Vector, scale: f64) -> Self {
        let d = value.len();
        Self {
            value,
            jacobian: Matrix::identity(d, d) * scale,
        }
    }

    pub fn into_value(self) -> Vector {
        self.value
    }
}

/// One solver step, recorded for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverStep {
    pub from_t: f64,
    pub to_t: f64,
    pub condition: Condition,
}

/// One-step first-order map from `t` to `s`:
/// `(alpha_s / alpha_t) z - alpha_s (int_{lambda_t}^{lambda_s} e^{-lambda} dlambda) eps(z, t, y)`.
pub fn phi(model: &EpsilonModel, z: &Vector, t: f64, s: f64, condition: &Condition) -> Result<Vector> {
    phi_guided(model, z, t, s, condition, 0.0)
}

/// [`phi`] driven by the guided teacher prediction (CFG with scale `omega`
/// when `condition` is a prompt).
pub fn phi_guided(
    model: &EpsilonModel,
    z: &Vector,
    t: f64,
    s: f64,
    condition: &Condition,
    omega: f64,
) -> Result<Vector> {
    let c = model.schedule.ddim_coefficients(t, s)?;
    if c.noise_coeff == 0.0 {
        return Ok(z * c.scale);
    }
    let eps = model.epsilon_guided(z, t, condition, omega)?;
    Ok(z * c.scale - eps * c.noise_coeff)
}

/// [`phi_guided`] with forward-mode propagation of the input Jacobian.
pub fn phi_tangent(
    model: &EpsilonModel,
    z: &Tangent,
    t: f64,
    s: f64,
    condition: &Condition,
    omega: f64,
) -> Result<Tangent> {
    let c = model.schedule.ddim_coefficients(t, s)?;
    if c.noise_coeff == 0.0 {
        return Ok(Tangent {
            value: &z.value * c.scale,
            jacobian: &z.jacobian * c.scale,
        });
    }
    let (eps, jac) = model.epsilon_guided_with_jacobian(&z.value, t, condition, omega)?;
    let d = z.value.len();
    let step_jac = Matrix::identity(d, d) * c.scale - jac * c.noise_coeff;
    Ok(Tangent {
        value: &z.value * c.scale - eps * c.noise_coeff,
        jacobian: step_jac * &z.jacobian,
    })
}

/// `n_steps` chained [`phi`] steps on a grid uniform in `t`.
pub fn phi_chain(
    model: &EpsilonModel,
    z: &Vector,
    t: f64,
    s: f64,
    condition: &Condition,
    n_steps: usize,
) -> Result<Vector> {
    let n = n_steps.max(1);
    let mut z = z.clone();
    for i in 0..n {
        let from = t + (s - t) * i as f64 / n as f64;
        let to = if i + 1 == n {
            s
        } else {
            t + (s - t) * (i + 1) as f64 / n as f64
        };
        z = phi(model, &z, from, to, condition)?;
    }
    Ok(z)
}

/// Right-hand side of the PF-ODE in time, `f(t) z + g(t)^2 / (2 sigma_t) eps(z, t, y)`.
pub fn pf_ode_velocity(model: &EpsilonModel, z: &Vector, t: f64, condition: &Condition) -> Result<Vector> {
    let sigma = model.schedule.sigma(t)?;
    let f = model.schedule.drift(t)?;
    let g2 = model.schedule.diffusion_sq(t)?;
    let eps = model.epsilon(z, t, condition)?;
    Ok(z * f + eps * (g2 / (2.0 * sigma)))
}

/// Ground-truth PF-ODE solution from `(z, t)` to time `s` with `n_steps`
/// classical fourth-order Runge-Kutta steps (uniform in `t`).
pub fn reference_solve(
    model: &EpsilonModel,
    z: &Vector,
    t: f64,
    s: f64,
    condition: &Condition,
    n_steps: usize,
) -> Result<Vector> {
    let sch = &model.schedule;
    let t = sch.check(t)?;
    let s = sch.check(s)?;
    if t == s {
        return Ok(z.clone());
    }
    let n = n_steps.max(1);
    let rhs = |nu: f64, y: &Vector| -> Result<Vector> {
        let tau = sch.time_from_noise_to_signal(nu)?;
        let alpha = 1.0 / (1.0 + nu * nu).sqrt();
        model.epsilon(&(y * alpha), tau, condition)
    };
    let mut y = z / sch.alpha(t)?;
    let mut nu = sch.noise_to_signal(t)?;
    for i in 1..=n {
        let next_t = if i == n { s } else { t + (s - t) * i as f64 / n as f64 };
        let next_nu = sch.noise_to_signal(next_t)?;
        let h = next_nu - nu;
        let mid = nu + 0.5 * h;
        let k1 = rhs(nu, &y)?;
        let k2 = rhs(mid, &(&y + &k1 * (0.5 * h)))?;
        let k3 = rhs(mid, &(&y + &k2 * (0.5 * h)))?;
        let k4 = rhs(next_nu, &(&y + &k3 * h))?;
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        nu = next_nu;
    }
    Ok(y * sch.alpha(s)?)
}

fn check_dynamic_order(s_m: f64, t: f64, s: f64) -> Result<()> {
    if s_m <= s && s <= t {
        Ok(())
    } else {
        Err(Error::Ordering(format!(
            "dynamic sampling needs s_m <= s <= t, got s_m={s_m}, s={s}, t={t}"
        )))
    }
}

/// Unconditional deterministic sampling from `z_{s_m}` up to `t`: two steps
/// through `s` when `t > threshold`, a single step otherwise.
pub fn dynamic_forward(
    model: &EpsilonModel,
    z_sm: &Vector,
    s_m: f64,
    t: f64,
    s: f64,
    threshold: f64,
) -> Result<Vector> {
    check_dynamic_order(s_m, t, s)?;
    let null = Condition::Unconditional;
    if t > threshold {
        let mid = phi(model, z_sm, s_m, s, &null)?;
        phi(model, &mid, s, t, &null)
    } else {
        phi(model, z_sm, s_m, t, &null)
    }
}

/// [`dynamic_forward`] with Jacobian propagation.
pub fn dynamic_forward_tangent(
    model: &EpsilonModel,
    z_sm: &Tangent,
    s_m: f64,
    t: f64,
    s: f64,
    threshold: f64,
) -> Result<Tangent> {
    check_dynamic_order(s_m, t, s)?;
    let null = Condition::Unconditional;
    if t > threshold {
        let mid = phi_tangent(model, z_sm, s_m, s, &null, 0.0)?;
        phi_tangent(model, &mid, s, t, &null, 0.0)
    } else {
        phi_tangent(model, z_sm, s_m, t, &null, 0.0)
    }
}
