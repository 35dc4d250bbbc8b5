//! Empirical scaling of the segmented distillation error with segment length
//! and solver step size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Theorem1Config;
use crate::consistency::{build_segmentation, SegmentationStrategy};
use crate::error::Result;
use crate::prior::{Condition, EpsilonModel};
use crate::solver::{phi_chain, reference_solve};
use crate::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// Segment count varies at fixed step size.
    Segments,
    /// Step size varies at fixed segment count.
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Row {
    pub sweep: Sweep,
    pub n_segments: usize,
    /// Longest segment after clamping to the schedule domain.
    pub segment_length: f64,
    pub dt: f64,
    pub sup_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub rows: Vec<Theorem1Row>,
    /// Log-log slope of `sup_error` against `segment_length` (segment sweep).
    pub segment_slope: f64,
    /// Log-log slope of `sup_error` against `dt` (step sweep).
    pub step_slope: f64,
}

/// Least-squares slope of `ln y` on `ln x`. `NaN` with fewer than two
/// usable points.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Draws `(x_0, eps*)` pairs: data from the condition's components and
/// standard-normal noise.
pub fn draw_samples(model: &EpsilonModel, condition: &Condition, n: usize, seed: u64) -> Result<Vec<(Vector, Vector)>> {
    let prior = &model.prior;
    let d = prior.dimension();
    let members = prior.subset(condition)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = members.iter().map(|&i| prior.weights()[i]).sum();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rand::Rng::random_range(&mut rng, 0.0..total);
        let mut acc = 0.0;
        let mut pick = members[members.len() - 1];
        for &i in &members {
            acc += prior.weights()[i];
            if u < acc {
                pick = i;
                break;
            }
        }
        let x0 =
            Vector::from_fn(d, |_, _| StandardNormal.sample(&mut rng)) * prior.scales()[pick] + &prior.means()[pick];
        let eps = Vector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        out.push((x0, eps));
    }
    Ok(out)
}

/// Supremum over segments, grid nodes and samples of
/// `|G(z~_t, t) - Phi_ref(z~_t, t, s_m)|`, where `G` is the `dt`-step
/// first-order chain back to the segment start, consistent by construction,
/// and `z~_t` is the matching forward chain from `z_{s_m} = alpha x_0 + sigma eps*`.
pub fn sup_distillation_error(
    model: &EpsilonModel,
    condition: &Condition,
    n_segments: usize,
    dt: f64,
    samples: &[(Vector, Vector)],
    reference_steps_per_unit: usize,
) -> Result<(f64, f64)> {
    let sch = &model.schedule;
    let seg = build_segmentation(SegmentationStrategy::Equal, n_segments, sch.horizon, 0.0)?;
    let mut sup: f64 = 0.0;
    let mut longest: f64 = 0.0;
    for m in 0..seg.count() {
        let (lo, hi) = seg.bounds(m);
        let (lo, hi) = (sch.clamp(lo), sch.clamp(hi));
        if hi <= lo {
            continue;
        }
        longest = longest.max(hi - lo);
        let n_nodes = ((hi - lo) / dt).round().max(1.0) as usize;
        let st = sch.at(lo)?;
        for (x0, eps) in samples {
            let z_sm = x0 * st.alpha + eps * st.sigma;
            for j in 1..=n_nodes {
                let t = lo + (hi - lo) * j as f64 / n_nodes as f64;
                let zt = phi_chain(model, &z_sm, lo, t, condition, j)?;
                let g = phi_chain(model, &zt, t, lo, condition, j)?;
                let n_ref = ((t - lo) * reference_steps_per_unit as f64).ceil().max(8.0) as usize;
                let truth = reference_solve(model, &zt, t, lo, condition, n_ref)?;
                sup = sup.max((g - truth).norm());
            }
        }
    }
    Ok((sup, longest))
}

/// Runs both sweeps of `cfg` (cells in parallel, rows in grid order).
pub fn verify_theorem1(
    model: &EpsilonModel,
    condition: &Condition,
    cfg: &Theorem1Config,
    seed: u64,
) -> Result<Theorem1Report> {
    let samples = draw_samples(model, condition, cfg.samples, seed)?;
    let mut cells: Vec<(Sweep, usize, f64)> = cfg
        .segment_counts
        .iter()
        .map(|&n| (Sweep::Segments, n, cfg.fixed_step))
        .collect();
    cells.extend(cfg.step_sizes.iter().map(|&h| (Sweep::Step, cfg.fixed_segments, h)));
    let rows = cells
        .par_iter()
        .map(|&(sweep, n, dt)| {
            let (sup_error, segment_length) =
                sup_distillation_error(model, condition, n, dt, &samples, cfg.reference_steps_per_unit)?;
            Ok(Theorem1Row {
                sweep,
                n_segments: n,
                segment_length,
                dt,
                sup_error,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |sweep: Sweep, x: fn(&Theorem1Row) -> f64| {
        let sel: Vec<&Theorem1Row> = rows.iter().filter(|r| r.sweep == sweep).collect();
        let xs: Vec<f64> = sel.iter().map(|r| x(r)).collect();
        let ys: Vec<f64> = sel.iter().map(|r| r.sup_error).collect();
        loglog_slope(&xs, &ys)
    };
    Ok(Theorem1Report {
        segment_slope: pick(Sweep::Segments, |r| r.segment_length),
        step_slope: pick(Sweep::Step, |r| r.dt),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let x = [0.1, 0.2, 0.4, 0.8];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.7)).collect();
        assert!((loglog_slope(&x, &y) - 1.7).abs() < 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_nan());
    }
}
