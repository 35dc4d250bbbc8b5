//! `sctd`: runs distillation and the verification suites from a TOML config.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sctd_core::config::RunConfig;
use sctd_core::harness::{self, Sweep};
use sctd_core::report::{self, Manifest};
use sctd_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "sctd",
    version,
    about = "Segmented consistency trajectory distillation on closed-form diffusion priors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimize a point scene against the prior with the configured loss.
    Distill(Common),
    /// Run every loss in `compare.losses` under the same seed and budget.
    Compare(Common),
    /// Tabulate the distillation error against segment length and step size.
    #[command(name = "verify-theorem1")]
    VerifyTheorem1(Common),
    /// Check the loss rewritings and guidance identities on random draws.
    #[command(name = "check-derivations")]
    CheckDerivations(CheckArgs),
    /// Measure the convergence orders of the first-order and reference solvers.
    #[command(name = "solver-order")]
    SolverOrder(Common),
    /// Probe how much the trajectory-averaged noise depends on the target time.
    #[command(name = "gcs-flaw")]
    GcsFlaw(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, or a `.csv` path for single-table commands.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for independent runs and grid cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override a config key, e.g. `--set loss.omega=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[command(flatten)]
    common: Common,
    /// Random draws per identity.
    #[arg(long, default_value_t = 200)]
    draws: usize,
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Usage(String),
    Checks(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_config() => 2,
            Failure::Core(e) if e.is_numerical() => 3,
            Failure::Usage(_) => 2,
            _ => 1,
        }
    }

    fn line(&self) -> String {
        match self {
            Failure::Core(Error::Config { path, message }) => format!("error[config] {path}: {message}"),
            Failure::Core(e) if e.is_numerical() => format!("error[numerical] {e}"),
            Failure::Core(e) => format!("error[runtime] {e}"),
            Failure::Usage(m) => format!("error[config] {m}"),
            Failure::Checks(n) => format!("error[check] {n} identity check(s) failed"),
        }
    }
}

type Outcome = Result<(), Failure>;

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let base = match &common.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| Failure::Usage(format!("--config {}: {e}", path.display())))?;
            toml::from_str::<toml::Value>(&text).map_err(|e| {
                Failure::Core(Error::Config {
                    path: "<document>".into(),
                    message: e.to_string(),
                })
            })?
        }
        None => toml::Value::Table(toml::Table::new()),
    };
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(RunConfig::with_overrides(base, &overrides)?)
}

/// Where a command's table and manifest go.
struct Output {
    table: PathBuf,
    manifest: PathBuf,
    dir: PathBuf,
}

fn output(common: &Common, command: &str, table_name: &str) -> Output {
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("out").join(command));
    if out.extension().is_some_and(|e| e == "csv") {
        let stem = out
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
        Output {
            manifest: dir.join(format!("{stem}.manifest.json")),
            table: out,
            dir,
        }
    } else {
        Output {
            table: out.join(table_name),
            manifest: out.join("manifest.json"),
            dir: out,
        }
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Failure::Usage(format!("--jobs: {e}")))
}

fn distill(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let run = harness::distill(&cfg)?;
    let out = output(common, "distill", "summary.csv");
    report::write_run_summary(&out.table, &cfg, &run)?;
    report::write_iterations(&out.dir.join("iterations.jsonl"), &run.rows)?;
    report::write_points(&out.dir.join("points.csv"), &run)?;
    Manifest::new("distill", &cfg, Some(run.noise_digest.clone())).write(&out.manifest)?;
    println!(
        "{} seed={} iterations={} max_point_error={:.6} relative_error={:.6} ({:.2?})",
        cfg.loss.kind,
        cfg.seed,
        run.rows.len(),
        run.recovery.max_point_error,
        run.recovery.max_point_error / run.target_separation(),
        run.wall_time
    );
    Ok(())
}

fn compare(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let rows = pool(common.jobs)?.install(|| harness::compare_losses(&cfg, &cfg.compare.losses))?;
    let out = output(common, "compare", "compare.csv");
    report::write_compare(&out.table, &rows)?;
    Manifest::new("compare", &cfg, None).write(&out.manifest)?;
    for r in &rows {
        println!(
            "[{}] {} omega={} relative_error={:.6} ({:.2?})",
            r.index, r.kind, r.omega, r.relative_error, r.wall_time
        );
    }
    Ok(())
}

fn verify_theorem1(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let model = cfg.model()?;
    let report =
        pool(common.jobs)?.install(|| harness::verify_theorem1(&model, &cfg.condition(), &cfg.theorem1, cfg.seed))?;
    let out = output(common, "verify-theorem1", "theorem1.csv");
    report::write_theorem1(&out.table, &report)?;
    Manifest::new("verify-theorem1", &cfg, None).write(&out.manifest)?;
    for r in &report.rows {
        let sweep = if r.sweep == Sweep::Segments { "segments" } else { "step" };
        println!(
            "{sweep:>8} N_s={:<4} segment_length={:.6} dt={:.6} sup_error={:.3e}",
            r.n_segments, r.segment_length, r.dt, r.sup_error
        );
    }
    println!(
        "slope vs segment length {:.3}, slope vs dt {:.3}",
        report.segment_slope, report.step_slope
    );
    Ok(())
}

fn check_derivations(args: &CheckArgs) -> Outcome {
    let cfg = load_config(&args.common)?;
    let model = cfg.model()?;
    let checks = harness::identity_suite(&model, &cfg.condition(), args.draws, cfg.seed)?;
    let out = output(&args.common, "check-derivations", "identities.csv");
    report::write_identities(&out.table, &checks)?;
    Manifest::new("check-derivations", &cfg, None).write(&out.manifest)?;
    for c in &checks {
        println!(
            "{} {} max_rel_error={:.3e} tolerance={:.0e} draws={}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.max_rel_error,
            c.tolerance,
            c.draws
        );
    }
    match checks.iter().filter(|c| !c.passed).count() {
        0 => Ok(()),
        n => Err(Failure::Checks(n)),
    }
}

fn solver_order(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let model = cfg.model()?;
    let report = harness::solver_order(&model, &cfg.condition(), &cfg.solver_order, cfg.seed)?;
    let out = output(common, "solver-order", "solver_order.csv");
    report::write_solver_order(&out.table, &report)?;
    Manifest::new("solver-order", &cfg, None).write(&out.manifest)?;
    println!(
        "first-order slope {:.3}, reference slope {:.3}",
        report.first_order_slope, report.reference_slope
    );
    Ok(())
}

fn gcs_flaw(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let model = cfg.model()?;
    let rows = harness::gcs_flaw_grid(&model, &cfg.condition(), &cfg.gcs_flaw, cfg.seed)?;
    let out = output(common, "gcs-flaw", "gcs_flaw.csv");
    report::write_gcs_flaw(&out.table, &rows)?;
    Manifest::new("gcs-flaw", &cfg, None).write(&out.manifest)?;
    for r in &rows {
        println!(
            "{:>7} t={} e={} e'={} gap={:.3e} noise_floor={:.3e}",
            r.prior, r.t, r.e, r.e_prime, r.gap, r.noise_floor
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Distill(c) => distill(c),
        Command::Compare(c) => compare(c),
        Command::VerifyTheorem1(c) => verify_theorem1(c),
        Command::CheckDerivations(a) => check_derivations(a),
        Command::SolverOrder(c) => solver_order(c),
        Command::GcsFlaw(c) => gcs_flaw(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.exit_code())
        }
    }
}
