//! Budget-matched comparison of several losses on one scene and prior.

use std::collections::BTreeMap;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distill::{distill, RunResult};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub index: usize,
    pub kind: LossKind,
    pub omega: f64,
    pub max_point_error: f64,
    pub assignment_cost: f64,
    /// `max_point_error` over the smallest target separation.
    pub relative_error: f64,
    /// Per-term magnitudes averaged over all iterations.
    pub mean_terms: BTreeMap<String, f64>,
    pub final_loss: f64,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl CompareRow {
    fn from_run(index: usize, loss: &LossConfig, run: &RunResult) -> Self {
        let mut mean_terms: BTreeMap<String, f64> = BTreeMap::new();
        let n = run.rows.len().max(1) as f64;
        for row in &run.rows {
            for (k, v) in &row.terms {
                *mean_terms.entry(k.clone()).or_insert(0.0) += v / n;
            }
        }
        let sep = run.target_separation();
        Self {
            index,
            kind: loss.kind,
            omega: loss.omega,
            max_point_error: run.recovery.max_point_error,
            assignment_cost: run.recovery.assignment_cost,
            relative_error: if sep > 0.0 {
                run.recovery.max_point_error / sep
            } else {
                f64::NAN
            },
            mean_terms,
            final_loss: run.rows.last().map_or(0.0, |r| r.loss),
            wall_time: run.wall_time,
        }
    }

    pub fn term(&self, name: &str) -> f64 {
        self.mean_terms.get(name).copied().unwrap_or(0.0)
    }
}

/// Runs `base` once per loss configuration with the same seed, views,
/// noise and budget. Rows come back in configuration order.
pub fn compare_losses(base: &RunConfig, losses: &[LossConfig]) -> Result<Vec<CompareRow>> {
    if losses.len() < 2 {
        return Err(Error::config("compare.losses", "need at least two loss configurations"));
    }
    losses
        .par_iter()
        .enumerate()
        .map(|(i, loss)| {
            let mut cfg = base.clone();
            cfg.loss = loss.clone();
            let run = distill(&cfg)?;
            Ok(CompareRow::from_run(i, loss, &run))
        })
        .collect()
}
