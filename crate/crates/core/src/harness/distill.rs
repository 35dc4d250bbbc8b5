//! The optimization loop: render, diffuse with fixed noise, evaluate the
//! configured loss per view and point, pull gradients back and take an Adam step.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::{adam_step, AdamState};
use super::metrics::{recovery_metric, Recovery};
use crate::config::RunConfig;
use crate::consistency::Segmentation;
use crate::error::{Error, Result};
use crate::losses::{LossEvaluator, LossKind, TimeSample};
use crate::prior::{Condition, EpsilonModel};
use crate::scene::{render, view_prior, SceneParams, ViewTransform};
use crate::schedule::NoiseSchedule;
use crate::Vector;

/// One optimizer step: sampled times, view-averaged loss terms and the
/// norm of the gradient applied to the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub t: f64,
    pub s: f64,
    pub e: f64,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub rows: Vec<IterationRow>,
    pub initial: SceneParams,
    pub theta: SceneParams,
    pub targets: Vec<Vector>,
    pub recovery: Recovery,
    /// Hex SHA-256 of the fixed per-view noise, little-endian `f64` bytes.
    pub noise_digest: String,
    pub wall_time: Duration,
}

impl RunResult {
    /// Smallest pairwise distance between target means (0 for one target).
    pub fn target_separation(&self) -> f64 {
        min_separation(&self.targets)
    }
}

pub fn min_separation(points: &[Vector]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min((&points[i] - &points[j]).norm());
        }
    }
    if best.is_finite() {
        best
    } else {
        0.0
    }
}

struct ViewSetup {
    view: ViewTransform,
    model: EpsilonModel,
    noise: Vec<Vector>,
}

/// Draws `(t, s, e)` for one step of the given loss.
pub fn sample_times<R: Rng + ?Sized>(
    kind: LossKind,
    schedule: &NoiseSchedule,
    seg: &Segmentation,
    t_raw: f64,
    rng: &mut R,
) -> Result<TimeSample> {
    let t = schedule.check(schedule.clamp(t_raw))?;
    let s_m = schedule.clamp(seg.locate(t).1);
    let lo = if kind == LossKind::Gcs {
        s_m.max(schedule.t_min)
    } else {
        s_m
    };
    if lo >= t {
        return Ok(TimeSample { t, s: lo, e: lo });
    }
    let s = rng.random_range(lo..t);
    let e = if s > schedule.t_min {
        rng.random_range(schedule.t_min..s)
    } else {
        schedule.t_min
    };
    Ok(TimeSample { t, s, e })
}

fn times_are_usable(kind: LossKind, ts: &TimeSample) -> bool {
    match kind {
        LossKind::Sds => true,
        LossKind::Cds | LossKind::Sctd => ts.s < ts.t,
        LossKind::Gcs => ts.e < ts.s && ts.s < ts.t,
    }
}

fn noise_digest(views: &[ViewSetup]) -> String {
    let mut h = Sha256::new();
    for v in views {
        for n in &v.noise {
            for x in n.iter() {
                h.update(x.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

fn initial_scene<R: Rng + ?Sized>(cfg: &RunConfig, center: &Vector, rng: &mut R) -> Result<SceneParams> {
    let d = cfg.prior.dimension;
    if let Some(points) = &cfg.scene.init_points {
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        return SceneParams::new(d, Vector::from_vec(flat));
    }
    let mut data = Vector::zeros(d * cfg.scene.points);
    for k in 0..cfg.scene.points {
        for i in 0..d {
            let n: f64 = StandardNormal.sample(rng);
            data[k * d + i] = center[i] + cfg.scene.init_spread * n;
        }
    }
    SceneParams::new(d, data)
}

/// Runs the configured number of iterations. Every random draw comes from
/// one ChaCha8 stream seeded by `cfg.seed`, in a fixed order.
pub fn distill(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    let started = Instant::now();
    let base = cfg.model()?;
    let seg = cfg.segmentation()?;
    let condition = cfg.condition();
    let d = cfg.prior.dimension;
    let k_points = cfg.scene.points;
    let targets = base.prior.condition_means(&condition)?;
    if targets.len() > k_points {
        return Err(Error::config(
            "scene.points",
            format!("need at least {} points for the condition's components", targets.len()),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let center = base.prior.mean(&Condition::Unconditional)?;
    let initial = initial_scene(cfg, &center, &mut rng)?;
    let views: Vec<ViewSetup> = (0..cfg.scene.n_views)
        .map(|_| {
            let view = if cfg.scene.identity_views {
                ViewTransform::identity(d)
            } else {
                ViewTransform::random(d, &mut rng)
            };
            let model = EpsilonModel::new(base.schedule, view_prior(&base.prior, &view));
            let noise = (0..k_points)
                .map(|_| Vector::from_fn(d, |_, _| StandardNormal.sample(&mut rng)))
                .collect();
            ViewSetup { view, model, noise }
        })
        .collect();
    let digest = noise_digest(&views);

    let mut theta = initial.clone();
    let mut adam = AdamState::new(theta.as_vector().len());
    let mut rows = Vec::with_capacity(cfg.iterations);
    let weight = 1.0 / views.len() as f64;
    let kind = cfg.loss.kind;

    for iteration in 0..cfg.iterations {
        let times = loop {
            let t_raw = cfg.sampler.sample(iteration, &mut rng);
            let ts = sample_times(kind, &base.schedule, &seg, t_raw, &mut rng)?;
            if times_are_usable(kind, &ts) {
                break ts;
            }
        };
        let mut loss = 0.0;
        let mut terms: BTreeMap<String, f64> = BTreeMap::new();
        let mut grad = Vector::zeros(theta.as_vector().len());
        for setup in &views {
            let rendered = render(&theta, &setup.view)?;
            let evaluator = LossEvaluator::new(&setup.model, &condition, &cfg.loss);
            let mut grad_view = Vector::zeros(rendered.len());
            for k in 0..k_points {
                let z0 = rendered.rows(k * d, d).into_owned();
                let fresh;
                let noise = if kind == LossKind::Sds {
                    fresh = Vector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
                    &fresh
                } else {
                    &setup.noise[k]
                };
                let report = evaluator.evaluate(&z0, &times, noise, &seg)?;
                if !report.is_finite() {
                    return Err(Error::NonFinite {
                        iteration,
                        detail: format!("non-finite {kind} loss at t={}, s={}, point {k}", times.t, times.s),
                    });
                }
                loss += weight * report.total;
                for (name, v) in &report.terms {
                    *terms.entry(name.clone()).or_insert(0.0) += weight * v;
                }
                grad_view.rows_mut(k * d, d).copy_from(&report.grad_z0);
            }
            grad.axpy(weight, &setup.view.pullback(&grad_view), 1.0);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                iteration,
                detail: "non-finite scene gradient".into(),
            });
        }
        rows.push(IterationRow {
            iteration,
            t: times.t,
            s: times.s,
            e: times.e,
            loss,
            terms,
            grad_norm: grad.norm(),
        });
        adam_step(&mut adam, theta.as_vector_mut(), &grad, cfg.learning_rate, &cfg.adam);
        if theta.as_vector().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                iteration,
                detail: "scene parameters diverged".into(),
            });
        }
    }

    let recovery = recovery_metric(&theta.points(), &targets)?;
    Ok(RunResult {
        rows,
        initial,
        theta,
        targets,
        recovery,
        noise_digest: digest,
        wall_time: started.elapsed(),
    })
}
