//! `raslab` — experiment driver for the Schwarz solver workbench.
//!
//! Two subcommands: `run` executes one configuration (optionally repeated
//! over consecutive seeds), `sweep` rescales the grid with the rank count
//! so every rank keeps a fixed local problem size. Both emit CSV to the
//! `--csv` path or stdout.
//!
//! Exit codes: 0 success, 1 non-convergence (or solver failure), 2
//! configuration error, 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use raslab::runtime::DelayModel;
use raslab::solvers::{CoarseRankMode, Variant};
use raslab_cli::{
    check_convergence, emit_csv, parse_coarse_mode, parse_delay, parse_triple, parse_variant,
    run_experiment, weak_scaling_sweep, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "raslab", version, about = "Schwarz solver experiment driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration, repeated over consecutive seeds.
    Run(RunArgs),
    /// Weak-scaling sweep: fixed local size across several rank grids.
    Sweep(SweepArgs),
}

fn triple(s: &str) -> Result<[usize; 3], String> {
    parse_triple(s).map_err(|e| e.to_string())
}

fn delay(s: &str) -> Result<DelayModel, String> {
    parse_delay(s).map_err(|e| e.to_string())
}

fn variant(s: &str) -> Result<Variant, String> {
    parse_variant(s).map_err(|e| e.to_string())
}

fn coarse_mode(s: &str) -> Result<CoarseRankMode, String> {
    parse_coarse_mode(s).map_err(|e| e.to_string())
}

/// Flags shared by both subcommands.
#[derive(Args)]
struct CommonArgs {
    /// Overlap layers added to each owned box.
    #[arg(long, default_value_t = 2)]
    overlap: usize,
    /// Relative residual target.
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Budget of global rounds (sweeps, for the synchronous variants).
    #[arg(long, default_value_t = 100_000)]
    kmax: u64,
    /// Reuse cap per coarse solution in the accurate variant.
    #[arg(long, default_value_t = 5)]
    max_corr: u32,
    /// Worker rank hosting the inline coarse solve.
    #[arg(long, default_value_t = 0)]
    i0: usize,
    /// Where the coarse systems are solved.
    #[arg(long, value_parser = coarse_mode, default_value = "inline")]
    coarse_rank_mode: CoarseRankMode,
    /// Message latency model: immediate, fixed:T, or uniform:LO:HI.
    #[arg(long, value_parser = delay, default_value = "immediate")]
    delay: DelayModel,
    /// Separate latency model for the coarse gather/broadcast and norm
    /// legs; defaults to --delay.
    #[arg(long, value_parser = delay)]
    coarse_delay: Option<DelayModel>,
    /// Base RNG seed; repetition r runs with seed + r.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Seeded repetitions per configuration.
    #[arg(long, default_value_t = 1)]
    reps: u32,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Exit 0 even when runs did not converge.
    #[arg(long)]
    allow_nonconverged: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Solver variant.
    #[arg(long, value_parser = variant)]
    variant: Variant,
    /// Interior grid sizes, e.g. 8x8x8.
    #[arg(long, value_parser = triple)]
    grid: [usize; 3],
    /// Rank grid, e.g. 2x2x2.
    #[arg(long, value_parser = triple)]
    proc: [usize; 3],
    /// Delivery-trace output path.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Variants to sweep (repeat the flag; all five when omitted).
    #[arg(long = "variant", value_parser = variant)]
    variants: Vec<Variant>,
    /// Base grid; together with the first --proc it fixes the local size.
    #[arg(long, value_parser = triple)]
    grid: [usize; 3],
    /// Rank grids to sweep (repeat the flag).
    #[arg(long = "proc", value_parser = triple, required = true)]
    procs: Vec<[usize; 3]>,
    #[command(flatten)]
    common: CommonArgs,
}

fn build_config(
    grid: [usize; 3],
    proc: [usize; 3],
    variant: Variant,
    trace: Option<PathBuf>,
    common: &CommonArgs,
) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(grid, proc, variant);
    cfg.overlap = common.overlap;
    cfg.eps = common.eps;
    cfg.k_max = common.kmax;
    cfg.max_corr = common.max_corr;
    cfg.i0 = common.i0;
    cfg.coarse_mode = common.coarse_rank_mode;
    cfg.delay = common.delay;
    cfg.coarse_delay = common.coarse_delay;
    cfg.seed = common.seed;
    cfg.reps = common.reps;
    cfg.csv = common.csv.clone();
    cfg.trace = trace;
    cfg.allow_nonconverged = common.allow_nonconverged;
    cfg
}

fn execute(command: Command) -> Result<(), raslab_cli::CliError> {
    let (cfg, rows) = match command {
        Command::Run(args) => {
            let cfg = build_config(args.grid, args.proc, args.variant, args.trace, &args.common);
            let rows = run_experiment(&cfg, 0)?;
            (cfg, rows)
        }
        Command::Sweep(args) => {
            let variants = if args.variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                args.variants.clone()
            };
            let base =
                build_config(args.grid, args.procs[0], variants[0], None, &args.common);
            let rows = weak_scaling_sweep(&base, &variants, &args.procs)?;
            (base, rows)
        }
    };
    emit_csv(&rows, cfg.csv.as_ref())?;
    check_convergence(&cfg, &rows)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
