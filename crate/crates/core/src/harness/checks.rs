//! Numerical checks of the algebraic identities, solver convergence orders
//! and the target-timestep probe for guided consistency sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::theorem::{draw_samples, loglog_slope};
use crate::config::{GcsFlawConfig, SolverOrderConfig};
use crate::consistency::{build_segmentation, g_theta_m, SegmentationStrategy};
use crate::error::Result;
use crate::losses::{gcs_flaw_probe, sds_as_sctd_decomposition, Weighting};
use crate::prior::{Condition, EpsilonModel, MixturePrior};
use crate::schedule::{NoiseCoeffForm, NoiseSchedule};
use crate::solver::{phi_chain, reference_solve};
use crate::Vector;

/// Relative tolerance of every identity in the suite.
pub const IDENTITY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    pub draws: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn rel_vec(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}

fn check(name: &str, errors: &[f64]) -> IdentityCheck {
    let max_rel_error = errors.iter().copied().fold(0.0, f64::max);
    IdentityCheck {
        name: name.into(),
        draws: errors.len(),
        max_rel_error,
        tolerance: IDENTITY_TOLERANCE,
        passed: errors.iter().all(|e| e.is_finite()) && max_rel_error <= IDENTITY_TOLERANCE,
    }
}

fn gaussian(d: usize, rng: &mut ChaCha8Rng) -> Vector {
    Vector::from_fn(d, |_, _| StandardNormal.sample(rng))
}

/// Runs every identity over `draws` random `(z_0, eps, t, s, omega, N_s)` tuples.
pub fn identity_suite(
    model: &EpsilonModel,
    condition: &Condition,
    draws: usize,
    seed: u64,
) -> Result<Vec<IdentityCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.dimension();
    let sch = &model.schedule;
    let log_snr_schedule = NoiseSchedule {
        noise_coeff_form: match sch.noise_coeff_form {
            NoiseCoeffForm::Ratio => NoiseCoeffForm::LogSnr,
            NoiseCoeffForm::LogSnr => NoiseCoeffForm::Ratio,
        },
        ..*sch
    };
    let null = Condition::Unconditional;
    let mut kernel = Vec::with_capacity(draws);
    let mut inversion = Vec::with_capacity(draws);
    let mut sctd_form = Vec::with_capacity(draws);
    let mut regrouped = Vec::with_capacity(draws);
    let mut guidance = Vec::with_capacity(draws);
    for _ in 0..draws {
        let z0 = gaussian(d, &mut rng) * 2.0;
        let eps = gaussian(d, &mut rng);
        let omega = rng.random_range(0.0..10.0);
        let n_seg = rng.random_range(1..=10);
        let seg = build_segmentation(SegmentationStrategy::Equal, n_seg, sch.horizon, 0.0)?;
        let t = rng.random_range(0.05..sch.t_max);
        let s_m = sch.clamp(seg.locate(t).1);
        let s = rng.random_range(s_m..t);

        // kernel identity: scale * z_t - coeff * eps = alpha_{s_m} z_0 + sigma_{s_m} eps
        let st = sch.at(t)?;
        let sm = sch.at(s_m)?;
        let zt = &z0 * st.alpha + &eps * st.sigma;
        let z_sm = &z0 * sm.alpha + &eps * sm.sigma;
        for schedule in [sch, &log_snr_schedule] {
            let c = schedule.ddim_coefficients(t, s_m)?;
            kernel.push(rel_vec(&(&zt * c.scale - &eps * c.noise_coeff), &z_sm));
        }

        // the teacher prediction is recovered from the consistency output
        let c = sch.ddim_coefficients(t, s_m)?;
        let g = g_theta_m(model, &zt, t, s_m, condition)?;
        let recovered = (&zt * c.scale - g) / c.noise_coeff;
        inversion.push(rel_vec(&recovered, &model.epsilon(&zt, t, condition)?));

        let dec = sds_as_sctd_decomposition(model, &z0, t, s, &eps, &seg, condition, omega, Weighting::Constant)?;
        sctd_form.push(rel(dec.sds, dec.sctd_form));
        regrouped.push(rel(dec.sds, dec.regrouped));

        // guided residual written with conditional or unconditional base
        let e_y = model.epsilon(&zt, t, condition)?;
        let e_null = model.epsilon(&zt, t, &null)?;
        let guided = model.epsilon_cfg(&zt, t, condition, omega)? - &eps;
        let regroup = (&e_null - &eps) + (&e_y - &e_null) * (omega + 1.0);
        guidance.push(rel_vec(&guided, &regroup));
    }
    Ok(vec![
        check("diffusion_kernel_identity", &kernel),
        check("epsilon_from_consistency_output", &inversion),
        check("sds_equals_segmented_form", &sctd_form),
        check("sds_equals_regrouped_form", &regrouped),
        check("guidance_regrouping", &guidance),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOrderRow {
    pub solver: String,
    pub steps: usize,
    pub step_size: f64,
    pub max_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOrderReport {
    pub rows: Vec<SolverOrderRow>,
    pub first_order_slope: f64,
    pub reference_slope: f64,
}

/// Global error of the one-step chain and of the reference integrator from
/// `t_start` to `t_end`, against the reference integrator at `truth_steps`.
pub fn solver_order(
    model: &EpsilonModel,
    condition: &Condition,
    cfg: &SolverOrderConfig,
    seed: u64,
) -> Result<SolverOrderReport> {
    let samples = draw_samples(model, condition, cfg.samples, seed)?;
    let sch = &model.schedule;
    let st = sch.at(cfg.t_start)?;
    let starts: Vec<Vector> = samples.iter().map(|(x, e)| x * st.alpha + e * st.sigma).collect();
    let truths = starts
        .iter()
        .map(|z| reference_solve(model, z, cfg.t_start, cfg.t_end, condition, cfg.truth_steps))
        .collect::<Result<Vec<_>>>()?;
    let span = (cfg.t_start - cfg.t_end).abs();
    let mut rows = Vec::new();
    for (name, counts) in [("phi", &cfg.phi_step_counts), ("rk4", &cfg.reference_step_counts)] {
        for &n in counts {
            let mut max_error: f64 = 0.0;
            for (z, truth) in starts.iter().zip(&truths) {
                let out = if name == "phi" {
                    phi_chain(model, z, cfg.t_start, cfg.t_end, condition, n)?
                } else {
                    reference_solve(model, z, cfg.t_start, cfg.t_end, condition, n)?
                };
                max_error = max_error.max((out - truth).norm());
            }
            rows.push(SolverOrderRow {
                solver: name.into(),
                steps: n,
                step_size: span / n as f64,
                max_error,
            });
        }
    }
    let slope = |name: &str| {
        let sel: Vec<&SolverOrderRow> = rows.iter().filter(|r| r.solver == name).collect();
        let h: Vec<f64> = sel.iter().map(|r| r.step_size).collect();
        let e: Vec<f64> = sel.iter().map(|r| r.max_error).collect();
        loglog_slope(&h, &e)
    };
    Ok(SolverOrderReport {
        first_order_slope: slope("phi"),
        reference_slope: slope("rk4"),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcsFlawRow {
    pub prior: String,
    pub t: f64,
    pub e: f64,
    pub e_prime: f64,
    /// Largest gap over the sampled starting points.
    pub gap: f64,
    /// Change of the gap under quadrature refinement, an estimate of the
    /// numerical error in `gap`.
    pub noise_floor: f64,
}

fn flaw_rows(
    name: &str,
    model: &EpsilonModel,
    condition: &Condition,
    cfg: &GcsFlawConfig,
    starts: &[(Vector, Vector)],
) -> Result<Vec<GcsFlawRow>> {
    let sch = &model.schedule;
    let mut rows = Vec::with_capacity(cfg.triples.len());
    for &[t, e, e_prime] in &cfg.triples {
        let st = sch.at(t)?;
        let mut gap: f64 = 0.0;
        let mut floor: f64 = 0.0;
        for (x0, eps) in starts {
            let z = x0 * st.alpha + eps * st.sigma;
            let coarse = gcs_flaw_probe(model, &z, t, e, e_prime, condition, cfg.n_grid, cfg.steps_per_node)?;
            let fine = gcs_flaw_probe(
                model,
                &z,
                t,
                e,
                e_prime,
                condition,
                2 * cfg.n_grid - 1,
                cfg.steps_per_node,
            )?;
            gap = gap.max(coarse);
            floor = floor.max((coarse - fine).abs());
        }
        rows.push(GcsFlawRow {
            prior: name.into(),
            t,
            e,
            e_prime,
            gap,
            noise_floor: floor,
        });
    }
    Ok(rows)
}

/// Probes every triple of `cfg` on `model` and on a point mass at the first
/// mean of `condition`.
pub fn gcs_flaw_grid(
    model: &EpsilonModel,
    condition: &Condition,
    cfg: &GcsFlawConfig,
    seed: u64,
) -> Result<Vec<GcsFlawRow>> {
    let starts = draw_samples(model, condition, cfg.samples, seed)?;
    let anchor = model.prior.condition_means(condition)?[0].clone();
    let delta = EpsilonModel::new(model.schedule, MixturePrior::delta(anchor.as_slice()));
    let delta_starts: Vec<(Vector, Vector)> = starts.iter().map(|(_, e)| (anchor.clone(), e.clone())).collect();
    let only = Condition::prompt(delta.prior.labels().next().unwrap_or("only").to_string());
    let mut rows = flaw_rows("delta", &delta, &only, cfg, &delta_starts)?;
    rows.extend(flaw_rows("mixture", model, condition, cfg, &starts)?);
    Ok(rows)
}
