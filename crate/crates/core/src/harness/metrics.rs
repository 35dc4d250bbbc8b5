//! Matched-assignment recovery error between scene points and target means.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vector;

/// Largest point count solved by exhaustive enumeration.
pub const EXHAUSTIVE_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    /// Sum of Euclidean distances over matched pairs.
    pub assignment_cost: f64,
    /// Largest matched distance.
    pub max_point_error: f64,
    /// `assignment[j]` is the point matched to target `j`.
    pub assignment: Vec<usize>,
}

/// Minimum-cost one-to-one matching of every target to a distinct point.
///
/// With at most [`EXHAUSTIVE_LIMIT`] points all injective assignments are
/// enumerated; ties keep the lexicographically first. Beyond that the
/// globally closest unmatched (target, point) pair is taken repeatedly,
/// which need not be optimal.
pub fn recovery_metric(points: &[Vector], targets: &[Vector]) -> Result<Recovery> {
    if points.len() < targets.len() {
        return Err(Error::Dimension {
            expected: targets.len(),
            got: points.len(),
        });
    }
    let dist = |j: usize, k: usize| (&points[k] - &targets[j]).norm();
    let assignment = if points.len() <= EXHAUSTIVE_LIMIT {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for perm in (0..points.len()).permutations(targets.len()) {
            let cost: f64 = perm.iter().enumerate().map(|(j, &k)| dist(j, k)).sum();
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, perm));
            }
        }
        best.map(|(_, p)| p).unwrap_or_default()
    } else {
        let mut assignment = vec![usize::MAX; targets.len()];
        let mut used = vec![false; points.len()];
        for _ in 0..targets.len() {
            let (j, k) = (0..targets.len())
                .filter(|&j| assignment[j] == usize::MAX)
                .cartesian_product((0..points.len()).filter(|&k| !used[k]))
                .min_by(|a, b| dist(a.0, a.1).total_cmp(&dist(b.0, b.1)))
                .expect("unmatched pair exists");
            assignment[j] = k;
            used[k] = true;
        }
        assignment
    };
    let errors: Vec<f64> = assignment.iter().enumerate().map(|(j, &k)| dist(j, k)).collect();
    Ok(Recovery {
        assignment_cost: errors.iter().sum(),
        max_point_error: errors.iter().copied().fold(0.0, f64::max),
        assignment,
    })
}
