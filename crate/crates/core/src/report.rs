//! Result files: a JSON run manifest, per-iteration JSONL and CSV tables.
//! Nothing time-dependent is written, so reruns are byte-identical.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::harness::{
    CompareRow, GcsFlawRow, IdentityCheck, IterationRow, RunResult, SolverOrderReport, Theorem1Report,
};
use crate::losses::TERM_NAMES;

/// Version of every file layout written here.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    /// SHA-256 of the fixed per-view noise, when the command distills.
    pub noise_digest: Option<String>,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, noise_digest: Option<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            seed: config.seed,
            noise_digest,
            config: config.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_table(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest round-trip decimal; `NaN` and infinities spelled out.
fn num(x: f64) -> String {
    if x == 0.0 {
        "0".into()
    } else if x.is_finite() {
        serde_json::to_string(&x).expect("finite floats serialize")
    } else {
        x.to_string()
    }
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// One JSON object per iteration.
pub fn write_iterations(path: &Path, rows: &[IterationRow]) -> Result<()> {
    let mut w = create(path)?;
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// One-row run summary.
pub fn write_run_summary(path: &Path, cfg: &RunConfig, run: &RunResult) -> Result<()> {
    let sep = run.target_separation();
    let header = strings(&[
        "schema_version",
        "loss",
        "seed",
        "iterations",
        "max_point_error",
        "assignment_cost",
        "target_separation",
        "relative_error",
        "final_loss",
        "noise_digest",
    ]);
    let row = vec![
        SCHEMA_VERSION.to_string(),
        cfg.loss.kind.to_string(),
        cfg.seed.to_string(),
        run.rows.len().to_string(),
        num(run.recovery.max_point_error),
        num(run.recovery.assignment_cost),
        num(sep),
        num(if sep > 0.0 {
            run.recovery.max_point_error / sep
        } else {
            f64::NAN
        }),
        num(run.rows.last().map_or(0.0, |r| r.loss)),
        run.noise_digest.clone(),
    ];
    write_table(path, &header, [row])
}

/// Final and initial scene points, one row per point with its matched target if any.
pub fn write_points(path: &Path, run: &RunResult) -> Result<()> {
    let d = run.theta.dimension();
    let mut header = strings(&["point", "matched_target"]);
    header.extend((0..d).map(|i| format!("x{i}")));
    header.extend((0..d).map(|i| format!("init_x{i}")));
    let initial = run.initial.points();
    let rows = run.theta.points().into_iter().enumerate().map(|(k, p)| {
        let target = run
            .recovery
            .assignment
            .iter()
            .position(|&a| a == k)
            .map_or(String::new(), |j| j.to_string());
        let mut row = vec![k.to_string(), target];
        row.extend(p.iter().map(|x| num(*x)));
        row.extend(initial[k].iter().map(|x| num(*x)));
        row
    });
    write_table(path, &header, rows)
}

pub fn write_compare(path: &Path, rows: &[CompareRow]) -> Result<()> {
    let mut header = strings(&[
        "index",
        "loss",
        "omega",
        "max_point_error",
        "assignment_cost",
        "relative_error",
        "final_loss",
    ]);
    header.extend(TERM_NAMES.iter().map(|t| format!("mean_{t}")));
    let body = rows.iter().map(|r| {
        let mut row = vec![
            r.index.to_string(),
            r.kind.to_string(),
            num(r.omega),
            num(r.max_point_error),
            num(r.assignment_cost),
            num(r.relative_error),
            num(r.final_loss),
        ];
        row.extend(TERM_NAMES.iter().map(|t| num(r.term(t))));
        row
    });
    write_table(path, &header, body)
}

pub fn write_theorem1(path: &Path, report: &Theorem1Report) -> Result<()> {
    let header = strings(&["sweep", "N_s", "segment_length", "dt", "sup_error"]);
    let body = report.rows.iter().map(|r| {
        vec![
            serde_json::to_value(r.sweep)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            r.n_segments.to_string(),
            num(r.segment_length),
            num(r.dt),
            num(r.sup_error),
        ]
    });
    write_table(path, &header, body)
}

pub fn write_identities(path: &Path, checks: &[IdentityCheck]) -> Result<()> {
    let header = strings(&["identity", "draws", "max_rel_error", "tolerance", "passed"]);
    let body = checks.iter().map(|c| {
        vec![
            c.name.clone(),
            c.draws.to_string(),
            num(c.max_rel_error),
            num(c.tolerance),
            c.passed.to_string(),
        ]
    });
    write_table(path, &header, body)
}

pub fn write_solver_order(path: &Path, report: &SolverOrderReport) -> Result<()> {
    let header = strings(&["solver", "steps", "step_size", "max_error"]);
    let body = report.rows.iter().map(|r| {
        vec![
            r.solver.clone(),
            r.steps.to_string(),
            num(r.step_size),
            num(r.max_error),
        ]
    });
    write_table(path, &header, body)
}

pub fn write_gcs_flaw(path: &Path, rows: &[GcsFlawRow]) -> Result<()> {
    let header = strings(&["prior", "t", "e", "e_prime", "gap", "noise_floor"]);
    let body = rows.iter().map(|r| {
        vec![
            r.prior.clone(),
            num(r.t),
            num(r.e),
            num(r.e_prime),
            num(r.gap),
            num(r.noise_floor),
        ]
    });
    write_table(path, &header, body)
}
