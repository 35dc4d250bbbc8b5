//! Run configuration: one TOML document with nested sections, plus flat
//! `key.path=value` overrides.

use serde::{Deserialize, Serialize};

use crate::consistency::{Segmentation, SegmentationSpec};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::prior::{Condition, EpsilonModel, MixturePrior, PriorSpec};
use crate::scene::TimestepSampler;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Number of points `K`.
    pub points: usize,
    /// Size of the fixed batch of views drawn at initialization.
    pub n_views: usize,
    /// Standard deviation of the Gaussian initialization around the
    /// unconditional prior mean.
    pub init_spread: f64,
    /// Explicit initial points; overrides the random initialization.
    pub init_points: Option<Vec<Vec<f64>>>,
    /// Use the identity as the only view instead of random rotations.
    pub identity_views: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            points: 8,
            n_views: 64,
            init_spread: 0.5,
            init_points: None,
            identity_views: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Theorem1Config {
    /// Segment counts `N_s` swept at fixed step size.
    pub segment_counts: Vec<usize>,
    /// Solver step sizes swept at fixed segment count.
    pub step_sizes: Vec<f64>,
    /// Step size used for the segment-count sweep.
    pub fixed_step: f64,
    /// Segment count used for the step-size sweep.
    pub fixed_segments: usize,
    /// Number of `(z_0, eps*)` draws the supremum runs over.
    pub samples: usize,
    /// Reference integrator steps per unit time.
    pub reference_steps_per_unit: usize,
}

impl Default for Theorem1Config {
    fn default() -> Self {
        Self {
            segment_counts: vec![16, 32, 64, 128],
            step_sizes: vec![1.0 / 512.0, 1.0 / 1024.0, 1.0 / 2048.0, 1.0 / 4096.0],
            fixed_step: 1.0 / 4096.0,
            fixed_segments: 32,
            samples: 4,
            reference_steps_per_unit: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOrderConfig {
    pub t_start: f64,
    pub t_end: f64,
    /// Step counts for the one-step first-order chain.
    pub phi_step_counts: Vec<usize>,
    /// Step counts for the Runge-Kutta reference integrator.
    pub reference_step_counts: Vec<usize>,
    /// Runge-Kutta steps of the solution everything is compared against.
    pub truth_steps: usize,
    pub samples: usize,
}

impl Default for SolverOrderConfig {
    fn default() -> Self {
        Self {
            t_start: 0.8,
            t_end: 0.2,
            phi_step_counts: vec![16, 32, 64, 128, 256],
            reference_step_counts: vec![4, 8, 16, 32],
            truth_steps: 4096,
            samples: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcsFlawConfig {
    /// Grid of `(t, e, e')` triples.
    pub triples: Vec<[f64; 3]>,
    pub n_grid: usize,
    pub steps_per_node: usize,
    pub samples: usize,
}

impl Default for GcsFlawConfig {
    fn default() -> Self {
        Self {
            triples: vec![[0.9, 0.1, 0.5], [0.8, 0.05, 0.3], [0.6, 0.1, 0.3], [0.5, 0.2, 0.3]],
            n_grid: 65,
            steps_per_node: 16,
            samples: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub losses: Vec<LossConfig>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let omega = LossConfig::default().omega;
        Self {
            losses: [LossKind::Sctd, LossKind::Sds, LossKind::Cds, LossKind::Gcs]
                .into_iter()
                .map(|k| LossConfig::new(k, omega))
                .collect(),
        }
    }
}

/// Everything one invocation needs. Every field has a documented default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Prompt label the scene is distilled toward.
    pub condition: String,
    pub schedule: NoiseSchedule,
    pub prior: PriorSpec,
    pub loss: LossConfig,
    pub segmentation: SegmentationSpec,
    pub sampler: TimestepSampler,
    pub scene: SceneConfig,
    pub adam: AdamConfig,
    pub theorem1: Theorem1Config,
    pub solver_order: SolverOrderConfig,
    pub gcs_flaw: GcsFlawConfig,
    pub compare: CompareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 2000,
            learning_rate: 0.005,
            condition: "a".into(),
            schedule: NoiseSchedule::default(),
            prior: PriorSpec::default(),
            loss: LossConfig::default(),
            segmentation: SegmentationSpec::default(),
            sampler: TimestepSampler::default(),
            scene: SceneConfig::default(),
            adam: AdamConfig::default(),
            theorem1: Theorem1Config::default(),
            solver_order: SolverOrderConfig::default(),
            gcs_flaw: GcsFlawConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML document; errors name the offending key path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        Self::from_toml_value(value)
    }

    pub fn from_toml_value(value: toml::Value) -> Result<Self> {
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            let message = e.into_inner().to_string();
            let first = message.lines().next().unwrap_or_default().to_string();
            Error::config(if path == "." { "<document>".into() } else { path }, first)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key.path=value` overrides (values parsed as TOML, falling
    /// back to a bare string) on top of `base` and re-validates.
    pub fn with_overrides(base: toml::Value, overrides: &[String]) -> Result<Self> {
        let mut doc = base;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(item.clone(), "override must be `key.path=value`"))?;
            let key = key.trim();
            let value = parse_override_value(raw.trim());
            set_path(&mut doc, key, value)?;
        }
        Self::from_toml_value(doc)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be finite and > 0"));
        }
        self.schedule.validate()?;
        let prior = MixturePrior::from_spec(&self.prior)?;
        let condition = self.condition();
        prior
            .subset(&condition)
            .map_err(|e| Error::config("condition", e.to_string()))?;
        self.loss.validate()?;
        for (i, l) in self.compare.losses.iter().enumerate() {
            l.validate().map_err(|e| match e {
                Error::Config { path, message } => Error::config(
                    format!("compare.losses[{i}].{}", path.trim_start_matches("loss.")),
                    message,
                ),
                other => other,
            })?;
        }
        Segmentation::from_spec(&self.segmentation, self.schedule.horizon)
            .map_err(|e| Error::config("segmentation", e.to_string()))?;
        self.sampler.validate()?;
        let (lo, hi) = self.sampler.support(0);
        if lo < 0.0 || hi > self.schedule.horizon {
            return Err(Error::config("sampler", "timestep support must lie inside the horizon"));
        }
        if self.scene.points == 0 {
            return Err(Error::config("scene.points", "must be >= 1"));
        }
        if self.scene.n_views == 0 {
            return Err(Error::config("scene.n_views", "must be >= 1"));
        }
        if !(self.scene.init_spread.is_finite() && self.scene.init_spread >= 0.0) {
            return Err(Error::config("scene.init_spread", "must be finite and >= 0"));
        }
        if let Some(points) = &self.scene.init_points {
            if points.len() != self.scene.points {
                return Err(Error::config(
                    "scene.init_points",
                    format!("expected {} points", self.scene.points),
                ));
            }
            if points
                .iter()
                .any(|p| p.len() != self.prior.dimension || p.iter().any(|x| !x.is_finite()))
            {
                return Err(Error::config(
                    "scene.init_points",
                    "points must be finite and match the prior dimension",
                ));
            }
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::config("adam", "need 0 <= beta1, beta2 < 1 and epsilon > 0"));
        }
        let th = &self.theorem1;
        if th.segment_counts.is_empty() || th.segment_counts.contains(&0) {
            return Err(Error::config(
                "theorem1.segment_counts",
                "must be non-empty and positive",
            ));
        }
        if th.step_sizes.is_empty()
            || th
                .step_sizes
                .iter()
                .chain([&th.fixed_step])
                .any(|h| h.is_nan() || *h <= 0.0)
        {
            return Err(Error::config("theorem1.step_sizes", "must be non-empty and positive"));
        }
        if th.fixed_segments == 0 || th.samples == 0 || th.reference_steps_per_unit == 0 {
            return Err(Error::config(
                "theorem1",
                "fixed_segments, samples and reference_steps_per_unit must be >= 1",
            ));
        }
        let so = &self.solver_order;
        for (key, counts) in [
            ("phi_step_counts", &so.phi_step_counts),
            ("reference_step_counts", &so.reference_step_counts),
        ] {
            if counts.len() < 2 || counts.contains(&0) {
                return Err(Error::config(
                    format!("solver_order.{key}"),
                    "need at least two positive step counts",
                ));
            }
        }
        if so.samples == 0 || so.truth_steps == 0 {
            return Err(Error::config("solver_order", "samples and truth_steps must be >= 1"));
        }
        for (i, tri) in self.gcs_flaw.triples.iter().enumerate() {
            let [t, e, ep] = *tri;
            if !(e < ep && ep < t) {
                return Err(Error::config(format!("gcs_flaw.triples[{i}]"), "need e < e' < t"));
            }
        }
        Ok(())
    }

    pub fn condition(&self) -> Condition {
        if self.condition.is_empty() || self.condition == "unconditional" {
            Condition::Unconditional
        } else {
            Condition::Prompt(self.condition.clone())
        }
    }

    pub fn model(&self) -> Result<EpsilonModel> {
        Ok(EpsilonModel::new(self.schedule, MixturePrior::from_spec(&self.prior)?))
    }

    pub fn segmentation(&self) -> Result<Segmentation> {
        Segmentation::from_spec(&self.segmentation, self.schedule.horizon)
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut table) => table.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    let mut cursor = doc;
    for part in &parts[..parts.len() - 1] {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not inside a table")))?;
        cursor = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| Error::config(key, "parent is not a table"))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn errors_name_the_key_path() {
        let err = RunConfig::from_toml_str("[loss]\nomega = \"big\"").unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("loss.omega"), "{err}");
        let err = RunConfig::from_toml_str("[scene]\npointz = 3").unwrap_err();
        assert!(err.to_string().contains("scene"), "{err}");
        let err = RunConfig::from_toml_str("iterations = 0").unwrap_err();
        assert!(err.to_string().contains("`iterations`"), "{err}");
        let err = RunConfig::from_toml_str("condition = \"zzz\"").unwrap_err();
        assert!(err.to_string().contains("`condition`"), "{err}");
    }

    #[test]
    fn overrides_apply() {
        let base = toml::Value::Table(toml::Table::new());
        let cfg = RunConfig::with_overrides(
            base,
            &["loss.omega=3.5".into(), "loss.kind=sds".into(), "iterations=10".into()],
        )
        .unwrap();
        assert_eq!(cfg.loss.omega, 3.5);
        assert_eq!(cfg.loss.kind, LossKind::Sds);
        assert_eq!(cfg.iterations, 10);
        let err =
            RunConfig::with_overrides(toml::Value::Table(toml::Table::new()), &["loss.omega=-1".into()]).unwrap_err();
        assert!(err.to_string().contains("loss.omega"));
    }
}
