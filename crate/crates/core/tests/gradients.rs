mod common;

use common::*;
use sctd_core::losses::{LossEvaluator, LossKind};
use sctd_core::prior::Condition;
use sctd_core::scene::{render, SceneParams, ViewTransform};
use sctd_core::Vector;

const DRAWS: usize = 50;
const TOLERANCE: f64 = 1e-5;

fn worst_gradient_error(kind: LossKind, seed: u64) -> f64 {
    let model = desk_model();
    let y = Condition::prompt("a");
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..DRAWS {
        let draw = random_draw(kind, &model, &mut rng);
        let ev = LossEvaluator::new(&model, &y, &draw.cfg);
        let report = ev.evaluate(&draw.z0, &draw.times, &draw.eps, &draw.seg).unwrap();
        let oracle = fd_gradient(
            |live| split_total(&model, &draw.cfg, &y, &draw.seg, live, &draw.z0, &draw.times, &draw.eps),
            &draw.z0,
            1e-4,
        );
        worst = worst.max(rel_err(&report.grad_z0, &oracle));
    }
    worst
}

#[test]
fn sds_gradient_matches_finite_differences() {
    let err = worst_gradient_error(LossKind::Sds, 1);
    assert!(err <= TOLERANCE, "{err}");
}

#[test]
fn cds_gradient_matches_finite_differences() {
    let err = worst_gradient_error(LossKind::Cds, 2);
    assert!(err <= TOLERANCE, "{err}");
}

#[test]
fn gcs_gradient_matches_finite_differences() {
    let err = worst_gradient_error(LossKind::Gcs, 3);
    assert!(err <= TOLERANCE, "{err}");
}

#[test]
fn sctd_gradient_matches_finite_differences() {
    let err = worst_gradient_error(LossKind::Sctd, 4);
    assert!(err <= TOLERANCE, "{err}");
}

#[test]
fn split_values_match_reported_totals() {
    let model = desk_model();
    let y = Condition::prompt("a");
    let mut rng = rng(5);
    for kind in [LossKind::Sds, LossKind::Cds, LossKind::Gcs, LossKind::Sctd] {
        for _ in 0..20 {
            let draw = random_draw(kind, &model, &mut rng);
            let report = LossEvaluator::new(&model, &y, &draw.cfg)
                .evaluate(&draw.z0, &draw.times, &draw.eps, &draw.seg)
                .unwrap();
            let oracle = split_total(
                &model,
                &draw.cfg,
                &y,
                &draw.seg,
                &draw.z0,
                &draw.z0,
                &draw.times,
                &draw.eps,
            );
            assert!(
                (report.total - oracle).abs() <= 1e-10 * (1.0 + oracle.abs()),
                "{kind}: {} vs {oracle}",
                report.total
            );
            let summed: f64 = report.terms.iter().map(|(k, v)| draw.cfg.term_weight(k) * v).sum();
            assert!((report.total - summed).abs() <= 1e-10 * (1.0 + summed.abs()));
        }
    }
}

#[test]
fn stop_gradient_branches_contribute_nothing() {
    // The reported gradient is the derivative in the live argument only;
    // differentiating through both arguments gives something else.
    let model = desk_model();
    let y = Condition::prompt("a");
    let mut rng = rng(6);
    for kind in [LossKind::Cds, LossKind::Gcs, LossKind::Sctd] {
        let mut separated = 0;
        for _ in 0..DRAWS {
            let draw = random_draw(kind, &model, &mut rng);
            let report = LossEvaluator::new(&model, &y, &draw.cfg)
                .evaluate(&draw.z0, &draw.times, &draw.eps, &draw.seg)
                .unwrap();
            let live_only = fd_gradient(
                |z| split_total(&model, &draw.cfg, &y, &draw.seg, z, &draw.z0, &draw.times, &draw.eps),
                &draw.z0,
                1e-4,
            );
            let both = fd_gradient(
                |z| split_total(&model, &draw.cfg, &y, &draw.seg, z, z, &draw.times, &draw.eps),
                &draw.z0,
                1e-4,
            );
            assert!(rel_err(&report.grad_z0, &live_only) <= TOLERANCE);
            if rel_err(&report.grad_z0, &both) > 1e-3 {
                separated += 1;
            }
        }
        assert!(
            separated > DRAWS / 2,
            "{kind}: stop-gradient made no difference in {} draws",
            DRAWS - separated
        );
    }
}

#[test]
fn render_jacobian_matches_finite_differences() {
    let mut rng = rng(7);
    for d in [2, 3] {
        for _ in 0..DRAWS {
            let view = ViewTransform::random(d, &mut rng);
            let theta = gaussian(3 * d, &mut rng);
            let jac = view.render_jacobian(3);
            for j in 0..3 * d {
                let h = 1e-6;
                let mut p = theta.clone();
                let mut m = theta.clone();
                p[j] += h;
                m[j] -= h;
                let rp = render(&SceneParams::new(d, p).unwrap(), &view).unwrap();
                let rm = render(&SceneParams::new(d, m).unwrap(), &view).unwrap();
                let col = (rp - rm) / (2.0 * h);
                let exact = jac.column(j).into_owned();
                assert!(rel_err(&exact, &col) <= 1e-6);
            }
        }
    }
}

#[test]
fn scene_gradient_is_the_pulled_back_view_gradient() {
    let model = desk_model();
    let y = Condition::prompt("a");
    let mut rng = rng(8);
    for _ in 0..DRAWS {
        let draw = random_draw(LossKind::Sctd, &model, &mut rng);
        let view = ViewTransform::random(2, &mut rng);
        let theta = draw.z0.clone();
        let z0 = render(&SceneParams::new(2, theta.clone()).unwrap(), &view).unwrap();
        let report = LossEvaluator::new(&model, &y, &draw.cfg)
            .evaluate(&z0, &draw.times, &draw.eps, &draw.seg)
            .unwrap();
        let frozen = z0.clone();
        let oracle = fd_gradient(
            |th: &Vector| {
                let live = render(&SceneParams::new(2, th.clone()).unwrap(), &view).unwrap();
                split_total(&model, &draw.cfg, &y, &draw.seg, &live, &frozen, &draw.times, &draw.eps)
            },
            &theta,
            1e-4,
        );
        assert!(rel_err(&view.pullback(&report.grad_z0), &oracle) <= TOLERANCE);
    }
}
