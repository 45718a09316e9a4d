//! Experiment harness behind the `raslab` binary.
//!
//! The library side owns everything testable: argument parsing helpers,
//! experiment configuration, the runners that map a configuration onto the
//! solver library, and the CSV emitter. `main` only parses the command line
//! and maps errors to exit codes.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use raslab::problem::{GridSpec, ProblemSet};
use raslab::runtime::{DelayModel, RuntimeConfig, SchedulerMode};
use raslab::solvers::{
    run_async_ras, run_async_two_level_accurate, run_async_two_level_basic, run_sync_ras,
    run_sync_two_level, CoarseRankMode, RunReport, SolverConfig, SolverError, Variant,
};
use thiserror::Error;

/// Exact column order of the emitted CSV.
pub const CSV_HEADER: &str = "run_id,variant,p,px,py,pz,local_n,overlap,eps,seed,rank,\
                              k_rounds,k_local,coarse_solves,corrections,wall_ms,final_relres,converged";

/// Harness failures, each mapped to one process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration or argument (exit code 2).
    #[error("{0}")]
    Config(String),
    /// Output could not be written (exit code 3).
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A run failed to converge and `--allow-nonconverged` was not given
    /// (exit code 1).
    #[error("run {run_id} ({variant}) did not converge: final relative residual {final_relres:e}")]
    NonConvergence { run_id: u64, variant: Variant, final_relres: f64 },
    /// The solver itself failed (exit code 1, or 2 for bad configurations).
    #[error(transparent)]
    Solver(#[from] SolverError),
}

impl CliError {
    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::NonConvergence { .. } => 1,
            CliError::Solver(SolverError::Runtime(
                raslab::runtime::RuntimeError::BadConfig(_),
            )) => 2,
            CliError::Solver(_) => 1,
        }
    }
}

/// One fully resolved experiment: a problem, a variant, and how to run it.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// Interior grid sizes per axis.
    pub grid: [usize; 3],
    /// Rank grid per axis.
    pub proc: [usize; 3],
    /// Overlap layers added to each owned box.
    pub overlap: usize,
    /// Solver variant.
    pub variant: Variant,
    /// Relative residual target.
    pub eps: f64,
    /// Round budget.
    pub k_max: u64,
    /// Reuse cap of the accurate variant.
    pub max_corr: u32,
    /// Worker rank hosting the inline coarse solve.
    pub i0: usize,
    /// Inline or dedicated coarse root.
    pub coarse_mode: CoarseRankMode,
    /// Point-to-point latency model.
    pub delay: DelayModel,
    /// Latency model of the coarse gather/broadcast and norm legs; defaults
    /// to `delay` when not given.
    pub coarse_delay: Option<DelayModel>,
    /// Base seed; repetition `r` runs with `seed + r`.
    pub seed: u64,
    /// Seeded repetitions.
    pub reps: u32,
    /// CSV output path (stdout when absent).
    pub csv: Option<PathBuf>,
    /// Delivery-trace output path.
    pub trace: Option<PathBuf>,
    /// Exit 0 even when runs did not converge.
    pub allow_nonconverged: bool,
}

impl ExperimentConfig {
    /// A config with the experiment-section defaults for the given problem
    /// shape and variant.
    pub fn new(grid: [usize; 3], proc: [usize; 3], variant: Variant) -> Self {
        ExperimentConfig {
            grid,
            proc,
            overlap: 2,
            variant,
            eps: 1e-6,
            k_max: 100_000,
            max_corr: 5,
            i0: 0,
            coarse_mode: CoarseRankMode::Inline,
            delay: DelayModel::Immediate,
            coarse_delay: None,
            seed: 1,
            reps: 1,
            csv: None,
            trace: None,
            allow_nonconverged: false,
        }
    }

    /// Checks every cross-field constraint that parsing alone cannot see.
    pub fn validate(&self) -> Result<(), CliError> {
        for a in 0..3 {
            if self.proc[a] == 0 || self.grid[a] == 0 {
                return Err(CliError::Config("grid and proc axes must be positive".into()));
            }
            if self.proc[a] > self.grid[a] {
                return Err(CliError::Config(format!(
                    "proc grid {} exceeds grid {} on axis {a}",
                    self.proc[a], self.grid[a]
                )));
            }
        }
        if self.overlap == 0 {
            return Err(CliError::Config("overlap must be at least 1".into()));
        }
        if self.reps == 0 {
            return Err(CliError::Config("reps must be at least 1".into()));
        }
        if self.eps < 0.0 || !self.eps.is_finite() {
            return Err(CliError::Config(format!("eps must be a finite nonnegative number, got {}", self.eps)));
        }
        let p = self.proc[0] * self.proc[1] * self.proc[2];
        if self.coarse_mode == CoarseRankMode::Inline && self.i0 >= p {
            return Err(CliError::Config(format!(
                "i0 {} is not a worker rank (p = {p})",
                self.i0
            )));
        }
        Ok(())
    }

    /// Rank count.
    pub fn p(&self) -> usize {
        self.proc[0] * self.proc[1] * self.proc[2]
    }
}

/// One CSV record: one rank of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub run_id: u64,
    pub variant: Variant,
    pub p: usize,
    pub px: usize,
    pub py: usize,
    pub pz: usize,
    /// Owned unknowns of this rank.
    pub local_n: usize,
    pub overlap: usize,
    pub eps: f64,
    pub seed: u64,
    pub rank: usize,
    pub k_rounds: u64,
    pub k_local: u64,
    /// Coarse systems solved at the root over the whole run (identical on
    /// every row of a run, like `final_relres`).
    pub coarse_solves: u64,
    /// Corrected updates applied by this rank.
    pub corrections: u64,
    pub wall_ms: f64,
    pub final_relres: f64,
    pub converged: bool,
}

/// Parses `NXxNYxNZ` triples such as `8x8x8`.
pub fn parse_triple(s: &str) -> Result<[usize; 3], CliError> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(CliError::Config(format!(
            "expected three x-separated sizes like 8x8x8, got `{s}`"
        )));
    }
    let mut out = [0usize; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .parse()
            .map_err(|_| CliError::Config(format!("`{part}` in `{s}` is not a size")))?;
    }
    Ok(out)
}

/// Parses `immediate`, `fixed:T`, or `uniform:LO:HI`.
pub fn parse_delay(s: &str) -> Result<DelayModel, CliError> {
    let mut parts = s.split(':');
    let head = parts.next().unwrap_or_default();
    let rest: Vec<&str> = parts.collect();
    let number = |t: &str| -> Result<u64, CliError> {
        t.parse().map_err(|_| CliError::Config(format!("`{t}` in `{s}` is not a tick count")))
    };
    match (head, rest.as_slice()) {
        ("immediate", []) => Ok(DelayModel::Immediate),
        ("fixed", [t]) => Ok(DelayModel::Fixed(number(t)?)),
        ("uniform", [lo, hi]) => {
            let (lo, hi) = (number(lo)?, number(hi)?);
            if lo > hi {
                return Err(CliError::Config(format!("uniform delay bounds are reversed in `{s}`")));
            }
            Ok(DelayModel::Uniform(lo, hi))
        }
        _ => Err(CliError::Config(format!(
            "unknown delay model `{s}` (expected immediate, fixed:T, or uniform:LO:HI)"
        ))),
    }
}

/// Parses a variant name as printed in the CSV.
pub fn parse_variant(s: &str) -> Result<Variant, CliError> {
    Variant::ALL
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            CliError::Config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
        })
}

/// Parses `inline` or `dedicated`.
pub fn parse_coarse_mode(s: &str) -> Result<CoarseRankMode, CliError> {
    match s {
        "inline" => Ok(CoarseRankMode::Inline),
        "dedicated" => Ok(CoarseRankMode::Dedicated),
        _ => Err(CliError::Config(format!(
            "unknown coarse rank mode `{s}` (expected inline or dedicated)"
        ))),
    }
}

fn solver_config(cfg: &ExperimentConfig) -> SolverConfig {
    SolverConfig {
        eps: cfg.eps,
        k_max: cfg.k_max,
        max_corr: cfg.max_corr,
        i0: cfg.i0,
        coarse_mode: cfg.coarse_mode,
        ..SolverConfig::default()
    }
}

fn runtime_config(cfg: &ExperimentConfig, seed: u64) -> RuntimeConfig {
    let mut rcfg = RuntimeConfig::new(
        cfg.p(),
        SchedulerMode::FreeRunning,
        cfg.delay,
        cfg.coarse_delay.unwrap_or(cfg.delay),
        seed,
    );
    rcfg.trace = cfg.trace.is_some();
    rcfg
}

/// Runs one seeded repetition and returns the report with the wall time of
/// the iteration loops alone (problem setup excluded).
fn run_once(
    ps: &ProblemSet,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(RunReport, f64), CliError> {
    let scfg = solver_config(cfg);
    let rcfg = runtime_config(cfg, seed);
    let t = Instant::now();
    let report = match cfg.variant {
        Variant::SyncOneLevel => run_sync_ras(ps, &scfg),
        Variant::SyncTwoLevel => {
            run_sync_two_level(ps, &scfg).map_err(|e| CliError::Config(e.to_string()))?
        }
        Variant::AsyncOneLevel => run_async_ras(ps, &scfg, &rcfg)?,
        Variant::AsyncTwoLevelBasic => run_async_two_level_basic(ps, &scfg, &rcfg)?,
        Variant::AsyncTwoLevelAccurate => run_async_two_level_accurate(ps, &scfg, &rcfg)?,
    };
    let wall_ms = t.elapsed().as_secs_f64() * 1e3;
    Ok((report, wall_ms))
}

fn rows_of_report(
    ps: &ProblemSet,
    cfg: &ExperimentConfig,
    report: &RunReport,
    run_id: u64,
    seed: u64,
    wall_ms: f64,
) -> Vec<CsvRow> {
    (0..cfg.p())
        .map(|rank| CsvRow {
            run_id,
            variant: cfg.variant,
            p: cfg.p(),
            px: cfg.proc[0],
            py: cfg.proc[1],
            pz: cfg.proc[2],
            local_n: ps.subdomains[rank].owned_slots.len(),
            overlap: cfg.overlap,
            eps: cfg.eps,
            seed,
            rank,
            k_rounds: report.k_rounds,
            k_local: report.k_local[rank],
            coarse_solves: report.coarse_solves,
            corrections: report.corrections[rank],
            wall_ms,
            final_relres: report.final_relres,
            converged: report.converged,
        })
        .collect()
}

/// Builds the problem and runs `reps` seeded repetitions of the configured
/// variant. Returns one row per rank per repetition; `run_id` starts at
/// `first_run_id`. Non-convergence is reported in the rows, not as an
/// error, so the caller can still emit the CSV before deciding the exit.
pub fn run_experiment(cfg: &ExperimentConfig, first_run_id: u64) -> Result<Vec<CsvRow>, CliError> {
    cfg.validate()?;
    let spec = GridSpec::new(cfg.grid[0], cfg.grid[1], cfg.grid[2], 4590.0);
    let ps = ProblemSet::build(spec, cfg.proc, cfg.overlap)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut rows = Vec::new();
    let mut traces = String::new();
    for rep in 0..cfg.reps {
        let run_id = first_run_id + u64::from(rep);
        let seed = cfg.seed + u64::from(rep);
        let (report, wall_ms) = run_once(&ps, cfg, seed)?;
        if let Some(lines) = &report.trace {
            for line in lines {
                let _ = writeln!(traces, "{run_id},{line}");
            }
        }
        rows.extend(rows_of_report(&ps, cfg, &report, run_id, seed, wall_ms));
    }
    if let Some(path) = &cfg.trace {
        fs::write(path, traces).map_err(|source| CliError::Io { path: path.clone(), source })?;
    }
    Ok(rows)
}

/// Runs every requested variant over every rank grid, holding the local
/// problem size of the base configuration fixed: the grid is rescaled so
/// each rank keeps the same owned box.
pub fn weak_scaling_sweep(
    base: &ExperimentConfig,
    variants: &[Variant],
    procs: &[[usize; 3]],
) -> Result<Vec<CsvRow>, CliError> {
    if variants.is_empty() || procs.is_empty() {
        return Err(CliError::Config("sweep needs at least one variant and one proc grid".into()));
    }
    for a in 0..3 {
        if !base.grid[a].is_multiple_of(base.proc[a]) {
            return Err(CliError::Config(format!(
                "sweep base grid {} is not a multiple of the base proc grid {} on axis {a}",
                base.grid[a], base.proc[a]
            )));
        }
    }
    let local = [
        base.grid[0] / base.proc[0],
        base.grid[1] / base.proc[1],
        base.grid[2] / base.proc[2],
    ];
    let mut rows = Vec::new();
    let mut run_id = 0;
    for &variant in variants {
        for &proc in procs {
            let mut cfg = base.clone();
            cfg.variant = variant;
            cfg.proc = proc;
            cfg.grid = [local[0] * proc[0], local[1] * proc[1], local[2] * proc[2]];
            let batch = run_experiment(&cfg, run_id)?;
            run_id += u64::from(cfg.reps);
            rows.extend(batch);
        }
    }
    Ok(rows)
}

/// Renders rows as CSV: the exact header line, then one comma-separated
/// line per row, newline-terminated.
pub fn render_csv(rows: &[CsvRow]) -> Result<String, CliError> {
    if rows.is_empty() {
        return Err(CliError::Config("no rows to emit".into()));
    }
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.variant,
            r.p,
            r.px,
            r.py,
            r.pz,
            r.local_n,
            r.overlap,
            r.eps,
            r.seed,
            r.rank,
            r.k_rounds,
            r.k_local,
            r.coarse_solves,
            r.corrections,
            r.wall_ms,
            r.final_relres,
            r.converged
        );
    }
    Ok(out)
}

/// Writes rows to `path`, or to stdout when `path` is `None`.
pub fn emit_csv(rows: &[CsvRow], path: Option<&PathBuf>) -> Result<(), CliError> {
    let text = render_csv(rows)?;
    match path {
        Some(path) => {
            fs::write(path, text).map_err(|source| CliError::Io { path: path.clone(), source })
        }
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(|source| CliError::Io { path: PathBuf::from("<stdout>"), source })
        }
    }
}

/// The non-convergence gate: the first non-converged row as an error,
/// unless the config allows them.
pub fn check_convergence(cfg: &ExperimentConfig, rows: &[CsvRow]) -> Result<(), CliError> {
    if cfg.allow_nonconverged {
        return Ok(());
    }
    match rows.iter().find(|r| !r.converged) {
        Some(r) => Err(CliError::NonConvergence {
            run_id: r.run_id,
            variant: r.variant,
            final_relres: r.final_relres,
        }),
        None => Ok(()),
    }
}
