//! Test-side oracles: each loss rebuilt from the solver and consistency
//! primitives with separate `live` and `frozen` scene inputs, so that the
//! derivative in `live` alone is the stop-gradient derivative.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sctd_core::consistency::{
    build_segmentation, f_theta_guided, g_theta_guided, g_theta_m, Segmentation, SegmentationStrategy,
};
use sctd_core::losses::{LossConfig, LossKind, TimeSample, Weighting};
use sctd_core::prior::{Condition, EpsilonModel, MixturePrior};
use sctd_core::schedule::NoiseSchedule;
use sctd_core::solver::{phi, phi_guided};
use sctd_core::Vector;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(d: usize, rng: &mut ChaCha8Rng) -> Vector {
    Vector::from_fn(d, |_, _| StandardNormal.sample(rng))
}

pub fn desk_model() -> EpsilonModel {
    EpsilonModel::new(NoiseSchedule::default(), MixturePrior::desk_default())
}

pub fn delta_model(mean: &[f64]) -> EpsilonModel {
    EpsilonModel::new(NoiseSchedule::default(), MixturePrior::delta(mean))
}

/// Independent form of the DDIM noise coefficient.
pub fn noise_coeff(model: &EpsilonModel, t: f64, s: f64) -> f64 {
    let sch = &model.schedule;
    let (at, st) = (sch.alpha(t).unwrap(), sch.sigma(t).unwrap());
    let (as_, ss) = (sch.alpha(s).unwrap(), sch.sigma(s).unwrap());
    as_ * (st / at - ss / as_)
}

pub fn weight(model: &EpsilonModel, weighting: Weighting, t: f64) -> f64 {
    match weighting {
        Weighting::Constant => 1.0,
        Weighting::SigmaSq => model.schedule.sigma(t).unwrap().powi(2),
    }
}

fn kernel(model: &EpsilonModel, z0: &Vector, eps: &Vector, t: f64) -> Vector {
    let sch = &model.schedule;
    z0 * sch.alpha(t).unwrap() + eps * sch.sigma(t).unwrap()
}

fn segment_start(model: &EpsilonModel, seg: &Segmentation, t: f64) -> f64 {
    model.schedule.clamp(seg.locate(t).1)
}

/// SCTD with live branches at `live` and stop-gradient branches at `frozen`.
#[allow(clippy::too_many_arguments)]
pub fn sctd_split(
    model: &EpsilonModel,
    cfg: &LossConfig,
    condition: &Condition,
    seg: &Segmentation,
    live: &Vector,
    frozen: &Vector,
    t: f64,
    s: f64,
    eps: &Vector,
) -> f64 {
    let null = Condition::Unconditional;
    let s_m = segment_start(model, seg, t);
    let k = noise_coeff(model, t, s_m);
    let b = weight(model, cfg.weighting, t) / (k * k);
    let threshold = cfg.sampling_threshold.unwrap_or(seg.t_tau());
    let forward = |z0: &Vector| {
        let z_sm = kernel(model, z0, eps, s_m);
        if t > threshold {
            let mid = phi(model, &z_sm, s_m, s, &null).unwrap();
            phi(model, &mid, s, t, &null).unwrap()
        } else {
            phi(model, &z_sm, s_m, t, &null).unwrap()
        }
    };
    let zt_live = forward(live);
    let zt_frozen = forward(frozen);
    let zs_hat = phi(model, &zt_frozen, t, s, condition).unwrap();
    let self_target = g_theta_m(model, &zs_hat, s, s_m, &null).unwrap();
    let g_live = g_theta_m(model, &zt_live, t, s_m, &null).unwrap();
    let self_live = if cfg.use_approximation {
        kernel(model, live, eps, s_m)
    } else {
        g_live.clone()
    };
    let cross_target = g_theta_m(model, &zt_frozen, t, s_m, condition).unwrap();
    b * ((self_target - self_live).norm_squared() + (cfg.omega + 1.0).powi(2) * (g_live - cross_target).norm_squared())
}

/// SDS value with no stop-gradient (the Jacobian-inclusive objective).
pub fn sds_value(
    model: &EpsilonModel,
    cfg: &LossConfig,
    condition: &Condition,
    z0: &Vector,
    t: f64,
    eps: &Vector,
) -> f64 {
    let zt = kernel(model, z0, eps, t);
    let e = model.epsilon_guided(&zt, t, condition, cfg.omega).unwrap();
    weight(model, cfg.weighting, t) * (e - eps).norm_squared()
}

#[allow(clippy::too_many_arguments)]
pub fn cds_split(
    model: &EpsilonModel,
    cfg: &LossConfig,
    condition: &Condition,
    live: &Vector,
    frozen: &Vector,
    t: f64,
    s: f64,
    eps: &Vector,
) -> f64 {
    let sch = &model.schedule;
    let c = weight(model, cfg.weighting, t) * (sch.alpha(t).unwrap() / sch.sigma(t).unwrap()).powi(2);
    let w = cfg.omega;
    let f_live = f_theta_guided(model, &kernel(model, live, eps, t), t, condition, w).unwrap();
    let zs_hat = phi_guided(model, &kernel(model, frozen, eps, t), t, s, condition, w).unwrap();
    let target = f_theta_guided(model, &zs_hat, s, condition, w).unwrap();
    c * (f_live - target).norm_squared()
}

/// GCS terms `(cc, cg, cp)`.
#[allow(clippy::too_many_arguments)]
pub fn gcs_split(
    model: &EpsilonModel,
    cfg: &LossConfig,
    condition: &Condition,
    live: &Vector,
    frozen: &Vector,
    t: f64,
    s: f64,
    e: f64,
    eps: &Vector,
) -> (f64, f64, f64) {
    let null = Condition::Unconditional;
    let w = cfg.omega;
    let chain = |z0: &Vector| {
        let ze = kernel(model, z0, eps, e);
        let zs = phi(model, &ze, e, s, &null).unwrap();
        let zt = phi(model, &zs, s, t, &null).unwrap();
        (ze, zt)
    };
    let (ze_live, zt_live) = chain(live);
    let (_, zt_frozen) = chain(frozen);
    let zs_hat = phi_guided(model, &zt_frozen, t, s, condition, w).unwrap();
    let cc = (g_theta_m(model, &zt_live, t, e, &null).unwrap() - g_theta_m(model, &zs_hat, s, e, &null).unwrap())
        .norm_squared();
    let f_live = f_theta_guided(model, &ze_live, e, &null, 0.0).unwrap();
    let guided = g_theta_guided(model, &zt_frozen, t, e, condition, w).unwrap();
    let cg = (&f_live - f_theta_guided(model, &guided, e, &null, 0.0).unwrap()).norm_squared();
    let cp = (&f_live - f_theta_guided(model, &guided, e, condition, w).unwrap()).norm_squared();
    (cc, cg, cp)
}

/// Total of the configured loss with live/frozen split.
#[allow(clippy::too_many_arguments)]
pub fn split_total(
    model: &EpsilonModel,
    cfg: &LossConfig,
    condition: &Condition,
    seg: &Segmentation,
    live: &Vector,
    frozen: &Vector,
    times: &TimeSample,
    eps: &Vector,
) -> f64 {
    match cfg.kind {
        LossKind::Sds => {
            if cfg.omit_jacobian {
                // linear surrogate whose gradient is 2 w alpha (eps_hat - eps)
                let zt = kernel(model, frozen, eps, times.t);
                let res = model.epsilon_guided(&zt, times.t, condition, cfg.omega).unwrap() - eps;
                let alpha = model.schedule.alpha(times.t).unwrap();
                weight(model, cfg.weighting, times.t) * (res.norm_squared() + 2.0 * alpha * res.dot(&(live - frozen)))
            } else {
                sds_value(model, cfg, condition, live, times.t, eps)
            }
        }
        LossKind::Cds => cds_split(model, cfg, condition, live, frozen, times.t, times.s, eps),
        LossKind::Gcs => {
            let (cc, cg, cp) = gcs_split(model, cfg, condition, live, frozen, times.t, times.s, times.e, eps);
            let w = cfg.gcs_weights;
            w.cc * cc + w.cg * cg + w.cp * cp
        }
        LossKind::Sctd => sctd_split(model, cfg, condition, seg, live, frozen, times.t, times.s, eps),
    }
}

/// Richardson-extrapolated central difference of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&Vector) -> f64, x: &Vector, h: f64) -> Vector {
    let central = |h: f64| {
        Vector::from_fn(x.len(), |i, _| {
            let mut p = x.clone();
            let mut m = x.clone();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    };
    let coarse = central(h);
    let fine = central(h / 2.0);
    (fine * 4.0 - coarse) / 3.0
}

pub fn rel_err(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-12)
}

/// One random loss configuration and evaluation point.
pub struct Draw {
    pub cfg: LossConfig,
    pub seg: Segmentation,
    pub z0: Vector,
    pub eps: Vector,
    pub times: TimeSample,
}

pub fn random_draw(kind: LossKind, model: &EpsilonModel, rng: &mut ChaCha8Rng) -> Draw {
    let sch = model.schedule;
    let d = model.dimension();
    let mut cfg = LossConfig::new(kind, rng.random_range(0.0..8.0));
    cfg.weighting = if rng.random_bool(0.5) {
        Weighting::Constant
    } else {
        Weighting::SigmaSq
    };
    cfg.use_approximation = rng.random_bool(0.5);
    cfg.omit_jacobian = rng.random_bool(0.5);
    cfg.gcs_weights.cc = rng.random_range(0.0..2.0);
    cfg.gcs_weights.cg = rng.random_range(0.0..2.0);
    cfg.gcs_weights.cp = rng.random_range(0.0..2.0);
    let seg = if rng.random_bool(0.5) {
        build_segmentation(SegmentationStrategy::Equal, rng.random_range(1..=8), sch.horizon, 0.1).unwrap()
    } else {
        let n = rng.random_range(2..=8);
        build_segmentation(SegmentationStrategy::Increasing, n, sch.horizon, 1.0 / (2.0 * n as f64)).unwrap()
    };
    // keep clear of segment edges so the stop-gradient targets are smooth
    let (t, s_m) = loop {
        let t: f64 = rng.random_range(0.05..0.95);
        let s_m = sch.clamp(seg.locate(t).1);
        if t - s_m > 0.02 {
            break (t, s_m);
        }
    };
    let s = rng.random_range(s_m + 0.25 * (t - s_m)..t - 0.1 * (t - s_m));
    let e = rng.random_range(sch.t_min.max(0.01)..s);
    Draw {
        cfg,
        seg,
        z0: gaussian(d, rng) * 1.5,
        eps: gaussian(d, rng),
        times: TimeSample { t, s, e },
    }
}
