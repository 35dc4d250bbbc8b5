//! Score-distillation losses (SDS, CDS, GCS, SCTD) with exact gradients
//! with respect to the rendered view `z_0`.
//!
//! Every loss has a live branch, differentiated analytically (including the
//! solver and epsilon-model Jacobians), and stop-gradient branches, which
//! enter the value only. Gradients are obtained by forward-mode propagation
//! of `d(.)/dz_0` through [`Tangent`]s.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::consistency::{f_theta_guided, f_theta_tangent, g_theta_guided, g_theta_tangent, Segmentation};
use crate::error::{Error, Result};
use crate::prior::{Condition, EpsilonModel};
use crate::solver::{dynamic_forward_tangent, phi_guided, reference_solve, Tangent};
use crate::Vector;

pub const SELF_CONSISTENCY: &str = "self_consistency";
pub const CROSS_CONSISTENCY: &str = "cross_consistency";
pub const GENERATIVE_PRIOR: &str = "generative_prior";
pub const SDS: &str = "sds";
pub const CDS: &str = "cds";
pub const CC: &str = "cc";
pub const CG: &str = "cg";
pub const CP: &str = "cp";

/// Every term name a [`LossReport`] may carry, in column order.
pub const TERM_NAMES: [&str; 8] = [
    SDS,
    CDS,
    CC,
    CG,
    CP,
    SELF_CONSISTENCY,
    CROSS_CONSISTENCY,
    GENERATIVE_PRIOR,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Sds,
    Cds,
    Gcs,
    #[default]
    Sctd,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Sds => "sds",
            LossKind::Cds => "cds",
            LossKind::Gcs => "gcs",
            LossKind::Sctd => "sctd",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The time weighting `w(t)` of the SDS objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Constant,
    SigmaSq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcsWeights {
    pub cc: f64,
    pub cg: f64,
    pub cp: f64,
}

impl Default for GcsWeights {
    fn default() -> Self {
        Self {
            cc: 1.0,
            cg: 1.0,
            cp: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Classifier-free guidance scale.
    pub omega: f64,
    pub weighting: Weighting,
    /// Replace the live `G^m(z_t, t, null)` of the SCTD self term by `z_{s_m}`.
    pub use_approximation: bool,
    /// Drop `d eps / dz_t` from the SDS gradient.
    pub omit_jacobian: bool,
    pub gcs_weights: GcsWeights,
    /// Threshold above which the forward sampling takes two steps; falls
    /// back to the segmentation `t_tau` when unset.
    pub sampling_threshold: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Sctd,
            omega: 7.5,
            weighting: Weighting::Constant,
            use_approximation: true,
            omit_jacobian: true,
            gcs_weights: GcsWeights::default(),
            sampling_threshold: None,
        }
    }
}

impl LossConfig {
    pub fn new(kind: LossKind, omega: f64) -> Self {
        Self {
            kind,
            omega,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega.is_finite() && self.omega >= 0.0) {
            return Err(Error::config("loss.omega", "must be finite and >= 0"));
        }
        for (name, w) in [
            ("cc", self.gcs_weights.cc),
            ("cg", self.gcs_weights.cg),
            ("cp", self.gcs_weights.cp),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(
                    format!("loss.gcs_weights.{name}"),
                    "must be finite and >= 0",
                ));
            }
        }
        if let Some(th) = self.sampling_threshold {
            if !th.is_finite() {
                return Err(Error::config("loss.sampling_threshold", "must be finite"));
            }
        }
        Ok(())
    }

    /// Multiplier applied to term `name` when forming the total.
    pub fn term_weight(&self, name: &str) -> f64 {
        match (self.kind, name) {
            (LossKind::Gcs, CC) => self.gcs_weights.cc,
            (LossKind::Gcs, CG) => self.gcs_weights.cg,
            (LossKind::Gcs, CP) => self.gcs_weights.cp,
            _ => 1.0,
        }
    }

    pub fn sampling_threshold_for(&self, seg: &Segmentation) -> f64 {
        self.sampling_threshold.unwrap_or_else(|| seg.t_tau())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
    pub grad_z0: Vector,
}

impl LossReport {
    pub fn zero(dimension: usize) -> Self {
        Self {
            total: 0.0,
            terms: BTreeMap::new(),
            grad_z0: Vector::zeros(dimension),
        }
    }

    pub fn term(&self, name: &str) -> f64 {
        self.terms.get(name).copied().unwrap_or(0.0)
    }

    /// Adds the scalar parts of `other` (total and terms) scaled by `factor`.
    pub fn accumulate_scalars(&mut self, other: &LossReport, factor: f64) {
        self.total += factor * other.total;
        for (k, v) in &other.terms {
            *self.terms.entry(k.clone()).or_insert(0.0) += factor * v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.terms.values().all(|v| v.is_finite())
            && self.grad_z0.iter().all(|g| g.is_finite())
    }
}

/// The SDS time weighting `w(t)`.
pub fn time_weight(model: &EpsilonModel, weighting: Weighting, t: f64) -> Result<f64> {
    Ok(match weighting {
        Weighting::Constant => 1.0,
        Weighting::SigmaSq => model.schedule.sigma(t)?.powi(2),
    })
}

/// `b(t) = w(t) / (alpha_{s_m} int_{lambda_t}^{lambda_{s_m}} e^{-lambda} dlambda)^2`.
pub fn sctd_weight(model: &EpsilonModel, weighting: Weighting, t: f64, s_m: f64) -> Result<f64> {
    let k = model.schedule.ddim_coefficients(t, s_m)?.noise_coeff;
    Ok(time_weight(model, weighting, t)? / (k * k))
}

/// Times drawn for one loss evaluation. `e` is only read by GCS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSample {
    pub t: f64,
    pub s: f64,
    pub e: f64,
}

/// Loss evaluation against one teacher, prompt and configuration.
#[derive(Debug, Clone, Copy)]
pub struct LossEvaluator<'a> {
    pub model: &'a EpsilonModel,
    pub condition: &'a Condition,
    pub config: &'a LossConfig,
}

impl<'a> LossEvaluator<'a> {
    pub fn new(model: &'a EpsilonModel, condition: &'a Condition, config: &'a LossConfig) -> Self {
        Self {
            model,
            condition,
            config,
        }
    }

    fn report(&self, terms: Vec<(&str, f64)>, grad_z0: Vector) -> LossReport {
        let total = terms.iter().map(|(k, v)| self.config.term_weight(k) * v).sum();
        LossReport {
            total,
            terms: terms.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            grad_z0,
        }
    }

    fn check_dim(&self, v: &Vector) -> Result<()> {
        let d = self.model.dimension();
        if v.len() == d {
            Ok(())
        } else {
            Err(Error::Dimension {
                expected: d,
                got: v.len(),
            })
        }
    }

    /// Dispatches on the configured loss kind.
    pub fn evaluate(&self, z0: &Vector, times: &TimeSample, noise: &Vector, seg: &Segmentation) -> Result<LossReport> {
        match self.config.kind {
            LossKind::Sds => self.sds(z0, times.t, noise),
            LossKind::Cds => self.cds(z0, times.t, times.s, noise),
            LossKind::Gcs => self.gcs(z0, times.t, times.s, times.e, noise),
            LossKind::Sctd => self.sctd(z0, times.t, times.s, noise, seg),
        }
    }

    /// `w(t) ||eps_hat(z_t, t, y) - eps||^2` with `z_t = alpha_t z_0 + sigma_t eps`.
    pub fn sds(&self, z0: &Vector, t: f64, eps: &Vector) -> Result<LossReport> {
        self.check_dim(z0)?;
        self.check_dim(eps)?;
        let st = self.model.schedule.at(t)?;
        let w = time_weight(self.model, self.config.weighting, t)?;
        let zt = z0 * st.alpha + eps * st.sigma;
        let omega = self.config.omega;
        let residual;
        let grad;
        if self.config.omit_jacobian {
            residual = self.model.epsilon_guided(&zt, t, self.condition, omega)? - eps;
            grad = &residual * (2.0 * w * st.alpha);
        } else {
            let (e, jac) = self.model.epsilon_guided_with_jacobian(&zt, t, self.condition, omega)?;
            residual = e - eps;
            grad = jac.tr_mul(&residual) * (2.0 * w * st.alpha);
        }
        Ok(self.report(vec![(SDS, w * residual.norm_squared())], grad))
    }

    /// `c(t) ||F(z_t, t, y) - sg(F(phi(z_t, t, s, y), s, y))||^2`, `c(t) = w(t) (alpha_t / sigma_t)^2`.
    pub fn cds(&self, z0: &Vector, t: f64, s: f64, eps_star: &Vector) -> Result<LossReport> {
        self.check_dim(z0)?;
        self.check_dim(eps_star)?;
        if s > t || s.is_nan() || t.is_nan() {
            return Err(Error::Ordering(format!("CDS needs s <= t, got s={s}, t={t}")));
        }
        let st = self.model.schedule.at(t)?;
        let c = time_weight(self.model, self.config.weighting, t)? * (st.alpha / st.sigma).powi(2);
        let omega = self.config.omega;
        let y = self.condition;
        let zt = Tangent::scaled_identity(z0 * st.alpha + eps_star * st.sigma, st.alpha);
        let live = f_theta_tangent(self.model, &zt, t, y, omega)?;
        let zs_hat = phi_guided(self.model, &zt.value, t, s, y, omega)?;
        let target = f_theta_guided(self.model, &zs_hat, s, y, omega)?;
        let residual = &live.value - target;
        let grad = live.jacobian.tr_mul(&residual) * (2.0 * c);
        Ok(self.report(vec![(CDS, c * residual.norm_squared())], grad))
    }

    /// The three guided-consistency-sampling terms with an identity decoder.
    ///
    /// Trajectory: `z_e = alpha_e z_0 + sigma_e eps*`, `z~_s = phi(z_e, e, s, null)`,
    /// `z~_t = phi(z~_s, s, t, null)`, `z^_s = phi(z~_t, t, s, y)`.
    pub fn gcs(&self, z0: &Vector, t: f64, s: f64, e: f64, eps_star: &Vector) -> Result<LossReport> {
        self.check_dim(z0)?;
        self.check_dim(eps_star)?;
        if !(e < s && s < t) {
            return Err(Error::Ordering(format!("GCS needs e < s < t, got e={e}, s={s}, t={t}")));
        }
        let m = self.model;
        let omega = self.config.omega;
        let y = self.condition;
        let null = Condition::Unconditional;
        let st_e = m.schedule.at(e)?;
        let ze = Tangent::scaled_identity(z0 * st_e.alpha + eps_star * st_e.sigma, st_e.alpha);
        let zs_tilde = crate::solver::phi_tangent(m, &ze, e, s, &null, 0.0)?;
        let zt_tilde = crate::solver::phi_tangent(m, &zs_tilde, s, t, &null, 0.0)?;
        let zs_hat = phi_guided(m, &zt_tilde.value, t, s, y, omega)?;

        // compact consistency
        let cc_live = g_theta_tangent(m, &zt_tilde, t, e, &null, 0.0)?;
        let cc_target = g_theta_guided(m, &zs_hat, s, e, &null, 0.0)?;
        let cc_res = &cc_live.value - cc_target;

        // conditional guidance and pixel constraint share the live F(z_e, e, null)
        let f_live = f_theta_tangent(m, &ze, e, &null, 0.0)?;
        let guided_e = g_theta_guided(m, &zt_tilde.value, t, e, y, omega)?;
        let cg_target = f_theta_guided(m, &guided_e, e, &null, 0.0)?;
        let cp_target = f_theta_guided(m, &guided_e, e, y, omega)?;
        let cg_res = &f_live.value - cg_target;
        let cp_res = &f_live.value - cp_target;

        let w = self.config.gcs_weights;
        let grad = cc_live.jacobian.tr_mul(&cc_res) * (2.0 * w.cc)
            + f_live.jacobian.tr_mul(&(cg_res.clone() * w.cg + &cp_res * w.cp)) * 2.0;
        Ok(self.report(
            vec![
                (CC, cc_res.norm_squared()),
                (CG, cg_res.norm_squared()),
                (CP, cp_res.norm_squared()),
            ],
            grad,
        ))
    }

    /// Segmented consistency trajectory distillation:
    /// `b(t) [ ||sg(G^m(z^_s, s, null)) - G^m(z~_t, t, null)||^2
    ///       + (omega+1)^2 ||G^m(z~_t, t, null) - sg(G^m(z~_t, t, y))||^2 ]`.
    pub fn sctd(&self, z0: &Vector, t: f64, s: f64, eps_star: &Vector, seg: &Segmentation) -> Result<LossReport> {
        self.check_dim(z0)?;
        self.check_dim(eps_star)?;
        let m = self.model;
        let sch = &m.schedule;
        let t = sch.check(t)?;
        let (_, s_m_nominal) = seg.locate(t);
        let s_m = sch.clamp(s_m_nominal);
        if !(s_m <= s && s < t) {
            return Err(Error::Ordering(format!(
                "SCTD needs s_m <= s < t, got s_m={s_m}, s={s}, t={t}"
            )));
        }
        let y = self.condition;
        let null = Condition::Unconditional;
        let omega = self.config.omega;
        let b = sctd_weight(m, self.config.weighting, t, s_m)?;
        let threshold = self.config.sampling_threshold_for(seg);

        let st_m = sch.at(s_m)?;
        let z_sm = Tangent::scaled_identity(z0 * st_m.alpha + eps_star * st_m.sigma, st_m.alpha);
        let zt_tilde = dynamic_forward_tangent(m, &z_sm, s_m, t, s, threshold)?;
        let zs_hat = phi_guided(m, &zt_tilde.value, t, s, y, 0.0)?;

        let self_target = g_theta_guided(m, &zs_hat, s, s_m, &null, 0.0)?;
        let g_null = g_theta_tangent(m, &zt_tilde, t, s_m, &null, 0.0)?;
        let g_cond = g_theta_guided(m, &zt_tilde.value, t, s_m, y, 0.0)?;

        let self_live = if self.config.use_approximation { &z_sm } else { &g_null };
        let self_res = self_target - &self_live.value;
        let cross_scale = (omega + 1.0).powi(2);
        let cross_res = &g_null.value - g_cond;

        let grad = self_live.jacobian.tr_mul(&self_res) * (-2.0 * b)
            + g_null.jacobian.tr_mul(&cross_res) * (2.0 * b * cross_scale);
        Ok(self.report(
            vec![
                (SELF_CONSISTENCY, b * self_res.norm_squared()),
                (CROSS_CONSISTENCY, b * cross_scale * cross_res.norm_squared()),
            ],
            grad,
        ))
    }
}

/// Both sides of the SDS-as-SCTD reformulation at one draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    /// `w(t) ||eps_hat(z_t, t, y) - eps||^2`.
    pub sds: f64,
    /// `b(t) ||self + omega cross + prior||^2` with conditional self/prior terms.
    pub sctd_form: f64,
    /// The regrouping with unconditional self/prior terms and `(omega + 1)` on the cross term.
    pub regrouped: f64,
}

/// Evaluates the SDS objective and its two segmented-consistency rewritings
/// independently, on `z_t = alpha_t z_0 + sigma_t eps` with
/// `z^_s = phi(z_t, t, s, y)`.
#[allow(clippy::too_many_arguments)]
pub fn sds_as_sctd_decomposition(
    model: &EpsilonModel,
    z0: &Vector,
    t: f64,
    s: f64,
    eps: &Vector,
    seg: &Segmentation,
    condition: &Condition,
    omega: f64,
    weighting: Weighting,
) -> Result<Decomposition> {
    let sch = &model.schedule;
    let t = sch.check(t)?;
    let s_m = sch.clamp(seg.locate(t).1);
    if !(s_m <= s && s < t) {
        return Err(Error::Ordering(format!(
            "decomposition needs s_m <= s < t, got s_m={s_m}, s={s}, t={t}"
        )));
    }
    let null = Condition::Unconditional;
    let st = sch.at(t)?;
    let st_m = sch.at(s_m)?;
    let zt = z0 * st.alpha + eps * st.sigma;
    let z_sm = z0 * st_m.alpha + eps * st_m.sigma;

    let w = time_weight(model, weighting, t)?;
    let eps_hat = model.epsilon_cfg(&zt, t, condition, omega)?;
    let sds = w * (eps_hat - eps).norm_squared();

    let b = sctd_weight(model, weighting, t, s_m)?;
    let g = |z: &Vector, from: f64, c: &Condition| g_theta_guided(model, z, from, s_m, c, 0.0);
    let zs_hat = phi_guided(model, &zt, t, s, condition, 0.0)?;
    let g_t_y = g(&zt, t, condition)?;
    let g_t_null = g(&zt, t, &null)?;

    let g_s_y = g(&zs_hat, s, condition)?;
    let self_y = &g_s_y - &g_t_y;
    let cross = &g_t_null - &g_t_y;
    let prior_y = &z_sm - &g_s_y;
    let sctd_form = b * (self_y + &cross * omega + prior_y).norm_squared();

    let g_s_null = g(&zs_hat, s, &null)?;
    let self_null = &g_s_null - &g_t_null;
    let prior_null = &z_sm - &g_s_null;
    let regrouped = b * (self_null + &cross * (omega + 1.0) + prior_null).norm_squared();

    Ok(Decomposition {
        sds,
        sctd_form,
        regrouped,
    })
}

/// `(int e^{-lambda} eps(z_lambda) dlambda) / (int e^{-lambda} dlambda)` over
/// `[lambda_t, lambda_target]` along the exact PF-ODE trajectory through `(z, t)`,
/// by composite Simpson quadrature on `n_grid` nodes uniform in `lambda`.
pub fn trajectory_epsilon_average(
    model: &EpsilonModel,
    z: &Vector,
    t: f64,
    target: f64,
    condition: &Condition,
    n_grid: usize,
    steps_per_node: usize,
) -> Result<Vector> {
    let sch = &model.schedule;
    let n = if n_grid < 3 { 3 } else { n_grid | 1 };
    let lam_t = sch.log_snr(t)?;
    let lam_e = sch.log_snr(target)?;
    let h = (lam_e - lam_t) / (n - 1) as f64;
    let mut num = Vector::zeros(z.len());
    let mut den = 0.0;
    let mut z_node = z.clone();
    let mut t_node = sch.check(t)?;
    for j in 0..n {
        let lam = lam_t + h * j as f64;
        let tj = if j == n - 1 {
            sch.check(target)?
        } else {
            sch.inverse_log_snr(lam)?
        };
        if j > 0 {
            z_node = reference_solve(model, &z_node, t_node, tj, condition, steps_per_node.max(1))?;
            t_node = tj;
        }
        let simpson = if j == 0 || j == n - 1 {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let kernel = (-lam).exp() * simpson;
        num.axpy(kernel, &model.epsilon(&z_node, tj, condition)?, 1.0);
        den += kernel;
    }
    Ok(num / den)
}

/// Norm of the difference between the exact-solution epsilon averages toward
/// two target times `e < e' < t`. A single epsilon prediction without a target
/// time cannot equal both unless epsilon is constant along the trajectory.
#[allow(clippy::too_many_arguments)]
pub fn gcs_flaw_probe(
    model: &EpsilonModel,
    z: &Vector,
    t: f64,
    e: f64,
    e_prime: f64,
    condition: &Condition,
    n_grid: usize,
    steps_per_node: usize,
) -> Result<f64> {
    if !(e < e_prime && e_prime < t) {
        return Err(Error::Ordering(format!(
            "flaw probe needs e < e' < t, got e={e}, e'={e_prime}, t={t}"
        )));
    }
    let a = trajectory_epsilon_average(model, z, t, e, condition, n_grid, steps_per_node)?;
    let b = trajectory_epsilon_average(model, z, t, e_prime, condition, n_grid, steps_per_node)?;
    Ok((a - b).norm())
}
