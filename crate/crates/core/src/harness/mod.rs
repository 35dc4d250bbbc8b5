//! Optimization loop, optimizer, metrics and verification experiments.

pub mod adam;
pub mod checks;
pub mod compare;
pub mod distill;
pub mod metrics;
pub mod theorem;

pub use adam::{adam_step, AdamState};
pub use checks::{
    gcs_flaw_grid, identity_suite, solver_order, GcsFlawRow, IdentityCheck, SolverOrderReport, SolverOrderRow,
};
pub use compare::{compare_losses, CompareRow};
pub use distill::{distill, IterationRow, RunResult};
pub use metrics::{recovery_metric, Recovery};
pub use theorem::{loglog_slope, verify_theorem1, Sweep, Theorem1Report, Theorem1Row};
