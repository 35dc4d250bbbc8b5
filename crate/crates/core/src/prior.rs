//! Closed-form epsilon models for isotropic Gaussian-mixture data.
//!
//! Diffusing `N(mu_i, c_i^2 I)` with the VP kernel gives
//! `N(alpha_t mu_i, (alpha_t^2 c_i^2 + sigma_t^2) I)`, so the scaled score
//! `-sigma_t grad ln p_t(z | y)` of the mixture is available exactly, together
//! with its Jacobian.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleState};
use crate::{Matrix, Vector};

const WEIGHT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    /// The null prompt; uses every component with its original weight.
    Unconditional,
    Prompt(String),
}

impl Condition {
    pub fn prompt(label: impl Into<String>) -> Self {
        Condition::Prompt(label.into())
    }

    pub fn is_prompt(&self) -> bool {
        matches!(self, Condition::Prompt(_))
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::Unconditional => f.write_str("unconditional"),
            Condition::Prompt(label) => f.write_str(label),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub mean: Vec<f64>,
    /// Isotropic standard deviation; `0` is a point mass.
    pub scale: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub label: String,
    pub components: Vec<usize>,
}

/// Serializable description of a [`MixturePrior`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub dimension: usize,
    pub components: Vec<ComponentSpec>,
    pub conditions: Vec<ConditionSpec>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        MixturePrior::desk_default().to_spec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixturePrior {
    dimension: usize,
    means: Vec<Vector>,
    scales: Vec<f64>,
    weights: Vec<f64>,
    conditions: BTreeMap<String, Vec<usize>>,
}

impl MixturePrior {
    pub fn from_spec(spec: &PriorSpec) -> Result<Self> {
        let d = spec.dimension;
        if d == 0 {
            return Err(Error::config("prior.dimension", "must be >= 1"));
        }
        if spec.components.is_empty() {
            return Err(Error::config("prior.components", "at least one component is required"));
        }
        let mut means = Vec::with_capacity(spec.components.len());
        let mut scales = Vec::with_capacity(spec.components.len());
        let mut weights = Vec::with_capacity(spec.components.len());
        for (i, c) in spec.components.iter().enumerate() {
            if c.mean.len() != d {
                return Err(Error::config(
                    format!("prior.components[{i}].mean"),
                    format!("expected {d} entries, got {}", c.mean.len()),
                ));
            }
            if c.mean.iter().any(|x| !x.is_finite()) {
                return Err(Error::config(format!("prior.components[{i}].mean"), "must be finite"));
            }
            if !(c.scale.is_finite() && c.scale >= 0.0) {
                return Err(Error::config(
                    format!("prior.components[{i}].scale"),
                    "must be finite and >= 0",
                ));
            }
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return Err(Error::config(
                    format!("prior.components[{i}].weight"),
                    "must be finite and > 0",
                ));
            }
            means.push(Vector::from_column_slice(&c.mean));
            scales.push(c.scale);
            weights.push(c.weight);
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::config(
                "prior.components",
                format!("weights must sum to 1, got {total}"),
            ));
        }
        let mut conditions = BTreeMap::new();
        for (i, c) in spec.conditions.iter().enumerate() {
            let path = format!("prior.conditions[{i}]");
            if c.label.is_empty() || c.label == "unconditional" {
                return Err(Error::config(
                    format!("{path}.label"),
                    "label must be non-empty and not `unconditional`",
                ));
            }
            if c.components.is_empty() {
                return Err(Error::config(format!("{path}.components"), "subset must be non-empty"));
            }
            let mut subset = c.components.clone();
            subset.sort_unstable();
            subset.dedup();
            if let Some(&bad) = subset.iter().find(|&&k| k >= means.len()) {
                return Err(Error::config(
                    format!("{path}.components"),
                    format!("index {bad} out of range"),
                ));
            }
            if conditions.insert(c.label.clone(), subset).is_some() {
                return Err(Error::config(
                    format!("{path}.label"),
                    format!("duplicate label `{}`", c.label),
                ));
            }
        }
        Ok(Self {
            dimension: d,
            means,
            scales,
            weights,
            conditions,
        })
    }

    pub fn to_spec(&self) -> PriorSpec {
        PriorSpec {
            dimension: self.dimension,
            components: self
                .means
                .iter()
                .zip(&self.scales)
                .zip(&self.weights)
                .map(|((m, &scale), &weight)| ComponentSpec {
                    mean: m.iter().copied().collect(),
                    scale,
                    weight,
                })
                .collect(),
            conditions: self
                .conditions
                .iter()
                .map(|(label, components)| ConditionSpec {
                    label: label.clone(),
                    components: components.clone(),
                })
                .collect(),
        }
    }

    /// Point mass at `mean`, with a single prompt `only` covering it.
    pub fn delta(mean: &[f64]) -> Self {
        Self::gaussian(mean, 0.0)
    }

    pub fn gaussian(mean: &[f64], scale: f64) -> Self {
        Self::from_spec(&PriorSpec {
            dimension: mean.len(),
            components: vec![ComponentSpec {
                mean: mean.to_vec(),
                scale,
                weight: 1.0,
            }],
            conditions: vec![ConditionSpec {
                label: "only".into(),
                components: vec![0],
            }],
        })
        .expect("single-component prior is valid")
    }

    /// The default two-dimensional desk prior. Prompt `a` owns two narrow
    /// components at `(1.5, +-1.5)`; prompt `b` owns a broad companion at each
    /// of those locations plus a blob at `(-2, 0)`, so the unconditional
    /// density is not the conditional one and the two modes of `a` are
    /// separated by 3.
    pub fn desk_default() -> Self {
        let component = |x: f64, y: f64, scale: f64| ComponentSpec {
            mean: vec![x, y],
            scale,
            weight: 0.2,
        };
        Self::from_spec(&PriorSpec {
            dimension: 2,
            components: vec![
                component(1.5, 1.5, 0.1),
                component(1.5, -1.5, 0.1),
                component(1.5, 1.5, 0.8),
                component(1.5, -1.5, 0.8),
                component(-2.0, 0.0, 0.5),
            ],
            conditions: vec![
                ConditionSpec {
                    label: "a".into(),
                    components: vec![0, 1],
                },
                ConditionSpec {
                    label: "b".into(),
                    components: vec![2, 3, 4],
                },
            ],
        })
        .expect("desk prior is valid")
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn means(&self) -> &[Vector] {
        &self.means
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.conditions.keys().map(String::as_str)
    }

    /// Component indices active under `condition`.
    pub fn subset(&self, condition: &Condition) -> Result<Vec<usize>> {
        match condition {
            Condition::Unconditional => Ok((0..self.means.len()).collect()),
            Condition::Prompt(label) => self
                .conditions
                .get(label)
                .cloned()
                .ok_or_else(|| Error::UnknownCondition(label.clone())),
        }
    }

    /// Means of the components active under `condition`.
    pub fn condition_means(&self, condition: &Condition) -> Result<Vec<Vector>> {
        Ok(self
            .subset(condition)?
            .into_iter()
            .map(|i| self.means[i].clone())
            .collect())
    }

    /// Weighted mean of the components active under `condition`.
    pub fn mean(&self, condition: &Condition) -> Result<Vector> {
        let subset = self.subset(condition)?;
        let total: f64 = subset.iter().map(|&i| self.weights[i]).sum();
        let mut acc = Vector::zeros(self.dimension);
        for &i in &subset {
            acc.axpy(self.weights[i] / total, &self.means[i], 1.0);
        }
        Ok(acc)
    }

    /// Applies the linear map `m` to every component mean.
    pub fn transformed(&self, m: &Matrix) -> Self {
        Self {
            means: self.means.iter().map(|mu| m * mu).collect(),
            ..self.clone()
        }
    }

    /// `ln p_t(z | y)` of the diffused mixture.
    pub fn log_density(&self, z: &Vector, st: &ScheduleState, condition: &Condition) -> Result<f64> {
        let terms = self.terms(z, st, condition)?;
        Ok(terms.log_norm)
    }

    fn terms(&self, z: &Vector, st: &ScheduleState, condition: &Condition) -> Result<MixtureTerms> {
        if z.len() != self.dimension {
            return Err(Error::Dimension {
                expected: self.dimension,
                got: z.len(),
            });
        }
        let subset = self.subset(condition)?;
        let total_weight: f64 = subset.iter().map(|&i| self.weights[i]).sum();
        let d = self.dimension as f64;
        let mut log_terms = Vec::with_capacity(subset.len());
        let mut offsets = Vec::with_capacity(subset.len());
        let mut variances = Vec::with_capacity(subset.len());
        for &i in &subset {
            let var = st.alpha * st.alpha * self.scales[i] * self.scales[i] + st.sigma * st.sigma;
            let diff = z - &self.means[i] * st.alpha;
            let log_w = (self.weights[i] / total_weight).ln();
            log_terms
                .push(log_w - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - diff.norm_squared() / (2.0 * var));
            offsets.push(diff / var);
            variances.push(var);
        }
        let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = log_terms.iter().map(|l| (l - max).exp()).sum();
        let log_norm = max + sum.ln();
        let resp = log_terms.iter().map(|l| (l - log_norm).exp()).collect();
        Ok(MixtureTerms {
            resp,
            offsets,
            variances,
            log_norm,
        })
    }
}

/// Per-component pieces of the diffused mixture at one `(z, t)`:
/// responsibilities `r_i`, `u_i = (z - alpha mu_i) / v_i` and `v_i`.
struct MixtureTerms {
    resp: Vec<f64>,
    offsets: Vec<Vector>,
    variances: Vec<f64>,
    log_norm: f64,
}

impl MixtureTerms {
    fn mean_offset(&self) -> Vector {
        let mut acc = Vector::zeros(self.offsets[0].len());
        for (r, u) in self.resp.iter().zip(&self.offsets) {
            acc.axpy(*r, u, 1.0);
        }
        acc
    }
}

/// The frozen teacher: a noise schedule plus a mixture prior, exposing
/// `eps_phi(z, t, y)` in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonModel {
    pub schedule: NoiseSchedule,
    pub prior: MixturePrior,
}

impl EpsilonModel {
    pub fn new(schedule: NoiseSchedule, prior: MixturePrior) -> Self {
        Self { schedule, prior }
    }

    pub fn dimension(&self) -> usize {
        self.prior.dimension()
    }

    /// `-sigma_t grad_z ln p_t(z | y)`.
    pub fn epsilon(&self, z: &Vector, t: f64, condition: &Condition) -> Result<Vector> {
        let st = self.schedule.at(t)?;
        let terms = self.prior.terms(z, &st, condition)?;
        Ok(terms.mean_offset() * st.sigma)
    }

    /// Epsilon together with its Jacobian `d eps / dz`, which is
    /// `sigma (sum r_i / v_i I - sum r_i u_i u_i^T + u_bar u_bar^T)`.
    pub fn epsilon_with_jacobian(&self, z: &Vector, t: f64, condition: &Condition) -> Result<(Vector, Matrix)> {
        let st = self.schedule.at(t)?;
        let terms = self.prior.terms(z, &st, condition)?;
        let d = z.len();
        let u_bar = terms.mean_offset();
        let mut jac = Matrix::zeros(d, d);
        let mut diag = 0.0;
        for ((r, u), v) in terms.resp.iter().zip(&terms.offsets).zip(&terms.variances) {
            diag += r / v;
            jac.ger(-*r, u, u, 1.0);
        }
        jac.ger(1.0, &u_bar, &u_bar, 1.0);
        for i in 0..d {
            jac[(i, i)] += diag;
        }
        Ok((u_bar * st.sigma, jac * st.sigma))
    }

    /// Classifier-free guidance `eps(y) + omega (eps(y) - eps(null))`.
    pub fn epsilon_cfg(&self, z: &Vector, t: f64, condition: &Condition, omega: f64) -> Result<Vector> {
        if !condition.is_prompt() {
            return Err(Error::GuidanceNeedsPrompt);
        }
        let cond = self.epsilon(z, t, condition)?;
        if omega == 0.0 {
            return Ok(cond);
        }
        let uncond = self.epsilon(z, t, &Condition::Unconditional)?;
        Ok(&cond + (&cond - uncond) * omega)
    }

    pub fn epsilon_cfg_with_jacobian(
        &self,
        z: &Vector,
        t: f64,
        condition: &Condition,
        omega: f64,
    ) -> Result<(Vector, Matrix)> {
        if !condition.is_prompt() {
            return Err(Error::GuidanceNeedsPrompt);
        }
        let (ec, jc) = self.epsilon_with_jacobian(z, t, condition)?;
        let (eu, ju) = self.epsilon_with_jacobian(z, t, &Condition::Unconditional)?;
        Ok((&ec * (1.0 + omega) - eu * omega, jc * (1.0 + omega) - ju * omega))
    }

    /// The teacher prediction a guided sampler uses for `condition`: CFG for
    /// a prompt, the plain unconditional epsilon otherwise.
    pub fn epsilon_guided(&self, z: &Vector, t: f64, condition: &Condition, omega: f64) -> Result<Vector> {
        match condition {
            Condition::Unconditional => self.epsilon(z, t, condition),
            Condition::Prompt(_) => self.epsilon_cfg(z, t, condition, omega),
        }
    }

    pub fn epsilon_guided_with_jacobian(
        &self,
        z: &Vector,
        t: f64,
        condition: &Condition,
        omega: f64,
    ) -> Result<(Vector, Matrix)> {
        match condition {
            Condition::Unconditional => self.epsilon_with_jacobian(z, t, condition),
            Condition::Prompt(_) => self.epsilon_cfg_with_jacobian(z, t, condition, omega),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn model(prior: MixturePrior) -> EpsilonModel {
        EpsilonModel::new(NoiseSchedule::default(), prior)
    }

    #[test]
    fn delta_prior_score_is_kernel_score() {
        let m = model(MixturePrior::delta(&[0.5, -1.0]));
        let z = Vector::from_vec(vec![0.3, 0.7]);
        let st = m.schedule.at(0.4).unwrap();
        let eps = m.epsilon(&z, 0.4, &Condition::Unconditional).unwrap();
        let expected = (&z - Vector::from_vec(vec![0.5, -1.0]) * st.alpha) / st.sigma;
        assert_abs_diff_eq!((eps - expected).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn score_vanishes_on_the_mode() {
        let m = model(MixturePrior::gaussian(&[1.0, 2.0], 0.3));
        let st = m.schedule.at(0.6).unwrap();
        let z = Vector::from_vec(vec![1.0, 2.0]) * st.alpha;
        let eps = m.epsilon(&z, 0.6, &Condition::prompt("only")).unwrap();
        assert!(eps.norm() < 1e-15);
    }

    #[test]
    fn unknown_condition_errors() {
        let m = model(MixturePrior::desk_default());
        let z = Vector::zeros(2);
        assert!(matches!(
            m.epsilon(&z, 0.5, &Condition::prompt("nope")),
            Err(Error::UnknownCondition(_))
        ));
        assert!(matches!(
            m.epsilon_cfg(&z, 0.5, &Condition::Unconditional, 1.0),
            Err(Error::GuidanceNeedsPrompt)
        ));
    }

    #[test]
    fn cfg_zero_scale_is_conditional() {
        let m = model(MixturePrior::desk_default());
        let z = Vector::from_vec(vec![0.2, -0.4]);
        let y = Condition::prompt("a");
        let a = m.epsilon_cfg(&z, 0.3, &y, 0.0).unwrap();
        let b = m.epsilon(&z, 0.3, &y).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cfg_full_subset_equals_unconditional() {
        let mut spec = MixturePrior::desk_default().to_spec();
        spec.conditions.push(ConditionSpec {
            label: "all".into(),
            components: vec![4, 3, 2, 1, 0],
        });
        let m = model(MixturePrior::from_spec(&spec).unwrap());
        let z = Vector::from_vec(vec![0.9, -0.1]);
        let u = m.epsilon(&z, 0.45, &Condition::Unconditional).unwrap();
        for omega in [0.0, 1.0, 7.5, 100.0] {
            let g = m.epsilon_cfg(&z, 0.45, &Condition::prompt("all"), omega).unwrap();
            assert!((g - &u).norm() <= 1e-12 * (1.0 + omega));
        }
    }

    #[test]
    fn cfg_regrouping_identity_by_hand() {
        // (eps_y - eps*) + w (eps_y - eps_null) == (eps_null - eps*) + (w + 1)(eps_y - eps_null)
        let (ey, en, es, w) = (2.0_f64, 1.0_f64, 0.5_f64, 3.0_f64);
        let lhs = (ey - es) + w * (ey - en);
        let rhs = (en - es) + (w + 1.0) * (ey - en);
        assert_eq!(lhs, 4.5);
        assert_eq!(rhs, 4.5);
    }

    #[test]
    fn spec_validation() {
        let mut spec = MixturePrior::desk_default().to_spec();
        spec.components[0].weight = 0.3;
        assert!(MixturePrior::from_spec(&spec).is_err());
        let mut spec = MixturePrior::desk_default().to_spec();
        spec.conditions[0].components.clear();
        let err = MixturePrior::from_spec(&spec).unwrap_err();
        assert!(err.to_string().contains("prior.conditions[0].components"));
        let mut spec = MixturePrior::desk_default().to_spec();
        spec.conditions[1].components.push(9);
        assert!(MixturePrior::from_spec(&spec).is_err());
        let mut spec = MixturePrior::desk_default().to_spec();
        spec.components[2].mean.push(0.0);
        assert!(MixturePrior::from_spec(&spec).is_err());
    }

    #[test]
    fn spec_round_trip() {
        let prior = MixturePrior::desk_default();
        assert_eq!(MixturePrior::from_spec(&prior.to_spec()).unwrap(), prior);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = model(MixturePrior::desk_default());
        let z = Vector::from_vec(vec![0.4, 0.3]);
        for cond in [Condition::Unconditional, Condition::prompt("a")] {
            let (_, jac) = m.epsilon_with_jacobian(&z, 0.35, &cond).unwrap();
            let h = 1e-6;
            for j in 0..2 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[j] += h;
                zm[j] -= h;
                let col = (m.epsilon(&zp, 0.35, &cond).unwrap() - m.epsilon(&zm, 0.35, &cond).unwrap()) / (2.0 * h);
                for i in 0..2 {
                    assert_abs_diff_eq!(jac[(i, j)], col[i], epsilon = 1e-6 * (1.0 + col[i].abs()));
                }
            }
        }
    }
}
