//! Continuous variance-preserving noise schedule.
//!
//! Time runs on `[t_min, t_max]` inside a nominal horizon `[0, T]`. Integer
//! timesteps of a 1000-step discrete model map onto this axis by dividing by
//! 1000 (see [`DISCRETE_STEPS`]).

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of discrete timesteps that span the horizon `[0, T]`.
pub const DISCRETE_STEPS: f64 = 1000.0;

const DOMAIN_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `alpha = cos(pi t / 2T)`, `sigma = sin(pi t / 2T)`.
    #[default]
    Cosine,
}

/// How the DDIM noise coefficient `alpha_s * int_{lambda_t}^{lambda_s} e^{-lambda} dlambda`
/// is evaluated. Both forms are algebraically identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseCoeffForm {
    /// `alpha_s * (sigma_t / alpha_t - sigma_s / alpha_s)`
    #[default]
    Ratio,
    /// `sigma_s * (exp(lambda_s - lambda_t) - 1)`
    LogSnr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub t_min: f64,
    pub t_max: f64,
    /// The nominal horizon `T`.
    pub horizon: f64,
    pub noise_coeff_form: NoiseCoeffForm,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            t_min: 0.002,
            t_max: 0.998,
            horizon: 1.0,
            noise_coeff_form: NoiseCoeffForm::Ratio,
        }
    }
}

/// Schedule quantities at one validated time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
}

impl ScheduleState {
    /// `lambda = ln(alpha / sigma)`.
    pub fn log_snr(&self) -> f64 {
        (self.alpha / self.sigma).ln()
    }

    /// `sigma / alpha = exp(-lambda)`, the natural integration variable of
    /// the exponential-integrator form of the PF-ODE.
    pub fn noise_to_signal(&self) -> f64 {
        self.sigma / self.alpha
    }
}

/// Coefficients of the one-step DDIM / DPM-Solver-1 map
/// `z_s = scale * z_t - noise_coeff * eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimCoefficients {
    pub scale: f64,
    pub noise_coeff: f64,
}

impl DdimCoefficients {
    /// Evaluates the closed form directly from the four schedule values.
    pub fn from_values(alpha_t: f64, sigma_t: f64, alpha_s: f64, sigma_s: f64) -> Self {
        Self {
            scale: alpha_s / alpha_t,
            noise_coeff: alpha_s * (sigma_t / alpha_t - sigma_s / alpha_s),
        }
    }
}

impl NoiseSchedule {
    pub fn new(t_min: f64, t_max: f64) -> Result<Self> {
        let schedule = Self {
            t_min,
            t_max,
            ..Self::default()
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::config("schedule.horizon", "must be finite and > 0"));
        }
        if !(self.t_min > 0.0 && self.t_min.is_finite()) {
            return Err(Error::config("schedule.t_min", "must be finite and > 0"));
        }
        if !(self.t_max < self.horizon && self.t_max > self.t_min) {
            return Err(Error::config("schedule.t_max", "must satisfy t_min < t_max < horizon"));
        }
        Ok(())
    }

    fn angle(&self, t: f64) -> f64 {
        FRAC_PI_2 * t / self.horizon
    }

    pub fn check(&self, t: f64) -> Result<f64> {
        if t.is_finite() && t >= self.t_min - DOMAIN_SLACK && t <= self.t_max + DOMAIN_SLACK {
            Ok(t.clamp(self.t_min, self.t_max))
        } else {
            Err(Error::TimeOutOfDomain {
                t,
                min: self.t_min,
                max: self.t_max,
            })
        }
    }

    /// Clamps a nominal time in `[0, T]` into the schedule domain.
    pub fn clamp(&self, t: f64) -> f64 {
        t.clamp(self.t_min, self.t_max)
    }

    pub fn at(&self, t: f64) -> Result<ScheduleState> {
        let t = self.check(t)?;
        let (sigma, alpha) = self.angle(t).sin_cos();
        Ok(ScheduleState { t, alpha, sigma })
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        Ok(self.at(t)?.alpha)
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok(self.at(t)?.sigma)
    }

    pub fn log_snr(&self, t: f64) -> Result<f64> {
        Ok(self.at(t)?.log_snr())
    }

    /// Attainable log-SNR range `[lambda(t_max), lambda(t_min)]`.
    pub fn log_snr_range(&self) -> (f64, f64) {
        let lo = (1.0 / self.angle(self.t_max).tan()).ln();
        let hi = (1.0 / self.angle(self.t_min).tan()).ln();
        (lo, hi)
    }

    pub fn inverse_log_snr(&self, lambda: f64) -> Result<f64> {
        let (min, max) = self.log_snr_range();
        let slack = 1e-12 * (1.0 + lambda.abs());
        if !(lambda.is_finite() && lambda >= min - slack && lambda <= max + slack) {
            return Err(Error::LogSnrOutOfRange { lambda, min, max });
        }
        let t = self.horizon / FRAC_PI_2 * (-lambda).exp().atan();
        Ok(t.clamp(self.t_min, self.t_max))
    }

    /// `sigma_t / alpha_t`.
    pub fn noise_to_signal(&self, t: f64) -> Result<f64> {
        Ok(self.at(t)?.noise_to_signal())
    }

    /// Inverse of [`Self::noise_to_signal`].
    pub fn time_from_noise_to_signal(&self, ratio: f64) -> Result<f64> {
        if !(ratio.is_finite() && ratio > 0.0) {
            return Err(Error::LogSnrOutOfRange {
                lambda: -ratio.ln(),
                min: self.log_snr_range().0,
                max: self.log_snr_range().1,
            });
        }
        self.check(self.horizon / FRAC_PI_2 * ratio.atan())
    }

    /// Drift coefficient `f(t) = d ln(alpha_t) / dt`.
    pub fn drift(&self, t: f64) -> Result<f64> {
        let t = self.check(t)?;
        Ok(-FRAC_PI_2 / self.horizon * self.angle(t).tan())
    }

    /// Squared diffusion coefficient `g(t)^2 = d sigma^2/dt - 2 f(t) sigma^2`.
    pub fn diffusion_sq(&self, t: f64) -> Result<f64> {
        let t = self.check(t)?;
        Ok(std::f64::consts::PI / self.horizon * self.angle(t).tan())
    }

    /// Coefficients of the one-step map from `t` to `s` (either direction).
    pub fn ddim_coefficients(&self, t: f64, s: f64) -> Result<DdimCoefficients> {
        let from = self.at(t)?;
        let to = self.at(s)?;
        if from.t == to.t {
            return Ok(DdimCoefficients {
                scale: 1.0,
                noise_coeff: 0.0,
            });
        }
        let scale = to.alpha / from.alpha;
        let noise_coeff = match self.noise_coeff_form {
            NoiseCoeffForm::Ratio => to.alpha * (from.sigma / from.alpha - to.sigma / to.alpha),
            NoiseCoeffForm::LogSnr => to.sigma * (to.log_snr() - from.log_snr()).exp_m1(),
        };
        Ok(DdimCoefficients { scale, noise_coeff })
    }

    /// Evenly spaced times on `[t_min, t_max]`.
    pub fn grid(&self, n: usize) -> Vec<f64> {
        match n {
            0 => Vec::new(),
            1 => vec![self.t_min],
            _ => (0..n)
                .map(|i| self.t_min + (self.t_max - self.t_min) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}
