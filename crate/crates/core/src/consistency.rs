//! Consistency-function parameterizations and trajectory segmentation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::{Condition, EpsilonModel};
use crate::solver::{phi_guided, phi_tangent, Tangent};
use crate::{Matrix, Vector};

const EDGE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationStrategy {
    /// Every segment has length `T / N_s`.
    #[default]
    Equal,
    /// Lengths `t_tau + 2m (T - N_s t_tau) / (N_s (N_s - 1))`, `m = 0..N_s`.
    Increasing,
}

/// Configuration block for a [`Segmentation`]. `t_tau` is in schedule units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationSpec {
    pub strategy: SegmentationStrategy,
    pub count: usize,
    pub t_tau: f64,
}

impl Default for SegmentationSpec {
    fn default() -> Self {
        Self {
            strategy: SegmentationStrategy::Equal,
            count: 5,
            t_tau: 0.1,
        }
    }
}

/// Edge points `0 = s_0 < s_1 < ... < s_{N_s} = T` on the nominal horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    edges: Vec<f64>,
    strategy: SegmentationStrategy,
    t_tau: f64,
}

pub fn build_segmentation(
    strategy: SegmentationStrategy,
    count: usize,
    horizon: f64,
    t_tau: f64,
) -> Result<Segmentation> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::Segmentation(format!("horizon must be > 0, got {horizon}")));
    }
    let n = count;
    let lengths: Vec<f64> = match strategy {
        SegmentationStrategy::Equal => {
            if n == 0 {
                return Err(Error::Segmentation("need at least one segment".into()));
            }
            vec![horizon / n as f64; n]
        }
        SegmentationStrategy::Increasing => {
            if n < 2 {
                return Err(Error::Segmentation(format!(
                    "increasing segmentation needs at least 2 segments, got {n}"
                )));
            }
            let nf = n as f64;
            if !(t_tau > 0.0 && t_tau <= horizon / nf * (1.0 + EDGE_TOLERANCE)) {
                return Err(Error::Segmentation(format!(
                    "increasing segmentation needs 0 < t_tau <= T/N_s = {}, got {t_tau}",
                    horizon / nf
                )));
            }
            let step = 2.0 * (horizon - nf * t_tau) / (nf * (nf - 1.0));
            (0..n).map(|m| t_tau + m as f64 * step.max(0.0)).collect()
        }
    };
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(0.0);
    let mut acc = 0.0;
    for len in &lengths[..n - 1] {
        acc += len;
        edges.push(acc);
    }
    edges.push(horizon);
    if edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Segmentation("edges must be strictly increasing".into()));
    }
    Ok(Segmentation { edges, strategy, t_tau })
}

impl Segmentation {
    pub fn from_spec(spec: &SegmentationSpec, horizon: f64) -> Result<Self> {
        build_segmentation(spec.strategy, spec.count, horizon, spec.t_tau)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn count(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.edges[self.edges.len() - 1]
    }

    pub fn strategy(&self) -> SegmentationStrategy {
        self.strategy
    }

    pub fn t_tau(&self) -> f64 {
        self.t_tau
    }

    pub fn lengths(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Index `m` and left edge `s_m = max{s_i <= t}`; `t = T` falls in the
    /// last (closed) segment.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let inner = &self.edges[..self.edges.len() - 1];
        let m = inner.partition_point(|&e| e <= t).saturating_sub(1);
        (m, self.edges[m])
    }

    /// `[s_m, s_{m+1}]` of segment `m`.
    pub fn bounds(&self, m: usize) -> (f64, f64) {
        (self.edges[m], self.edges[m + 1])
    }
}

pub fn locate_segment(seg: &Segmentation, t: f64) -> (usize, f64) {
    seg.locate(t)
}

/// `F(z, t, y) = (z - sigma_t eps(z, t, y)) / alpha_t`, the one-step estimate of `z_0`.
pub fn f_theta(model: &EpsilonModel, z: &Vector, t: f64, condition: &Condition) -> Result<Vector> {
    f_theta_guided(model, z, t, condition, 0.0)
}

pub fn f_theta_guided(model: &EpsilonModel, z: &Vector, t: f64, condition: &Condition, omega: f64) -> Result<Vector> {
    let st = model.schedule.at(t)?;
    let eps = model.epsilon_guided(z, t, condition, omega)?;
    Ok((z - eps * st.sigma) / st.alpha)
}

pub fn f_theta_tangent(
    model: &EpsilonModel,
    z: &Tangent,
    t: f64,
    condition: &Condition,
    omega: f64,
) -> Result<Tangent> {
    let st = model.schedule.at(t)?;
    let (eps, jac) = model.epsilon_guided_with_jacobian(&z.value, t, condition, omega)?;
    let d = z.value.len();
    let local = (Matrix::identity(d, d) - jac * st.sigma) / st.alpha;
    Ok(Tangent {
        value: (&z.value - eps * st.sigma) / st.alpha,
        jacobian: local * &z.jacobian,
    })
}

fn check_target(t: f64, target: f64) -> Result<()> {
    if target <= t {
        Ok(())
    } else {
        Err(Error::Ordering(format!(
            "consistency target {target} must not exceed t={t}"
        )))
    }
}

/// `G^m(z, t, y)`: the one-step first-order map from `t` to the segment
/// edge `s_m`. `G^m(z, s_m, y) = z`.
pub fn g_theta_m(model: &EpsilonModel, z: &Vector, t: f64, s_m: f64, condition: &Condition) -> Result<Vector> {
    g_theta_guided(model, z, t, s_m, condition, 0.0)
}

pub fn g_theta_guided(
    model: &EpsilonModel,
    z: &Vector,
    t: f64,
    target: f64,
    condition: &Condition,
    omega: f64,
) -> Result<Vector> {
    check_target(t, target)?;
    phi_guided(model, z, t, target, condition, omega)
}

pub fn g_theta_tangent(
    model: &EpsilonModel,
    z: &Tangent,
    t: f64,
    target: f64,
    condition: &Condition,
    omega: f64,
) -> Result<Tangent> {
    check_target(t, target)?;
    phi_tangent(model, z, t, target, condition, omega)
}
