//! Solver drivers: synchronous reference sweeps and the asynchronous
//! one- and two-level variants built on the message runtime.
//!
//! All variants iterate the same restricted additive Schwarz step: each rank
//! solves its overlapping subdomain problem and only the owned part of the
//! correction enters the global iterate (Boolean partition-of-unity
//! weights). The two-level variants blend that update half-and-half with an
//! aggregated coarse-space correction. Synchronous drivers sweep all ranks
//! in lockstep with exact data exchange and serve as references; the
//! asynchronous drivers run each rank as a message-driven state machine
//! whose residual norms, coarse right-hand sides, and exits travel through
//! non-blocking collectives.

mod one_level;
mod sync;
mod two_level;

pub use one_level::run_async_ras;
pub use sync::{run_sync_ras, run_sync_two_level};
pub use two_level::{run_async_two_level_accurate, run_async_two_level_basic};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::problem::{ProblemError, ProblemSet, SubdomainProblem};
use crate::runtime::RuntimeError;
use crate::sparse::{norm2, CsrMatrix, SpdFactor};

/// Point-to-point tag for the running-iterate halo exchange.
pub(crate) const TAG_X: u32 = 0;
/// Point-to-point tag for the snapshot consistency exchange.
pub(crate) const TAG_XBAR: u32 = 1;
/// Point-to-point tag for refreshing the non-owned overlap slots of the
/// running iterate from their owners.
pub(crate) const TAG_XSYNC: u32 = 2;

/// The five solver variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Synchronous one-level sweeps.
    SyncOneLevel,
    /// Asynchronous one-level iteration.
    AsyncOneLevel,
    /// Synchronous two-level sweeps (coarse correction every sweep).
    SyncTwoLevel,
    /// Asynchronous two-level iteration with the coarse right-hand side
    /// read straight from the possibly inconsistent local residuals.
    AsyncTwoLevelBasic,
    /// Asynchronous two-level iteration with a snapshot-consistent coarse
    /// right-hand side and bounded reuse of each correction.
    AsyncTwoLevelAccurate,
}

impl Variant {
    /// All variants, in presentation order.
    pub const ALL: [Variant; 5] = [
        Variant::SyncOneLevel,
        Variant::AsyncOneLevel,
        Variant::SyncTwoLevel,
        Variant::AsyncTwoLevelBasic,
        Variant::AsyncTwoLevelAccurate,
    ];

    /// Stable name used on the command line and in CSV output.
    pub fn name(self) -> &'static str {
        match self {
            Variant::SyncOneLevel => "sync-1l",
            Variant::AsyncOneLevel => "async-1l",
            Variant::SyncTwoLevel => "sync-2l",
            Variant::AsyncTwoLevelBasic => "async-2l-basic",
            Variant::AsyncTwoLevelAccurate => "async-2l-accurate",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Variant, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?} (expected one of sync-1l, async-1l, sync-2l, async-2l-basic, async-2l-accurate)"))
    }
}

/// Where the coarse solves happen in the asynchronous two-level variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoarseRankMode {
    /// Rank 0 doubles as the coarse root.
    #[default]
    Inline,
    /// An extra rank beyond the workers serves the coarse problem.
    Dedicated,
}

/// Knobs shared by every solver variant.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Convergence threshold on the relative residual norm.
    pub eps: f64,
    /// Bound on completed residual-norm rounds (sweeps, for the
    /// synchronous drivers) before giving up.
    pub k_max: u64,
    /// How many local updates may reuse one coarse correction in the
    /// accurate variant.
    pub max_corr: u32,
    /// Which worker rank doubles as the coarse root when the coarse mode
    /// is inline. Ignored in dedicated mode and by the one-level variants.
    pub i0: usize,
    /// Placement of the coarse root.
    pub coarse_mode: CoarseRankMode,
    /// Weight of the fine and coarse parts in the two-level update.
    pub blend: f64,
    /// Record the global iterate after every local update.
    pub record_trajectory: bool,
    /// Record per-rank snapshot residual data (accurate variant only).
    pub record_snapshots: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            eps: 1e-6,
            k_max: 100_000,
            max_corr: 5,
            i0: 0,
            coarse_mode: CoarseRankMode::Inline,
            blend: 0.5,
            record_trajectory: false,
            record_snapshots: false,
        }
    }
}

/// Per-rank record of one snapshot round in the accurate variant: the owned
/// snapshot values and the owned rows of the snapshot residual, both in
/// owned-slot order.
#[derive(Debug, Clone)]
pub struct SnapshotRecord {
    /// Recording rank.
    pub rank: usize,
    /// Coarse round the snapshot belongs to (0-based).
    pub round: u64,
    /// Snapshot of the owned iterate values.
    pub owned_x: Vec<f64>,
    /// Owned rows of the snapshot residual.
    pub owned_r: Vec<f64>,
}

/// One solved coarse system, recorded at the root.
#[derive(Debug, Clone)]
pub struct CoarseRound {
    /// Gathered right-hand side, indexed by rank.
    pub r0: Vec<f64>,
    /// Coarse solution that was broadcast.
    pub x0: Vec<f64>,
}

/// Outcome of a solver run.
#[derive(Debug, Clone)]
pub struct RunReport {
    /// Which variant ran.
    pub variant: Variant,
    /// Number of subdomains.
    pub p: usize,
    /// The run exited through the residual-norm test and the exact final
    /// residual confirms it.
    pub converged: bool,
    /// The run exited through the residual-norm test (as opposed to hitting
    /// the round bound or diverging).
    pub exited_via_norm: bool,
    /// Completed residual-norm rounds (identical on every rank).
    pub k_rounds: u64,
    /// Local updates per rank.
    pub k_local: Vec<u64>,
    /// Corrected (two-level) updates per rank.
    pub corrections: Vec<u64>,
    /// Coarse corrections received per rank.
    pub versions: Vec<u64>,
    /// Per rank, how often each coarse solution was applied. In the
    /// accurate variant the leading entry counts the damped updates taken
    /// with the initial zero coarse vector, before any solution arrived.
    pub per_version_corrections: Vec<Vec<u64>>,
    /// Coarse systems solved at the root.
    pub coarse_solves: u64,
    /// Exact relative residual of the assembled final iterate.
    pub final_relres: f64,
    /// Assembled final iterate (owned values).
    pub x: Vec<f64>,
    /// Ticks the event engine ran for (zero for synchronous drivers).
    pub ticks: u64,
    /// Global iterate after each sweep / local update, when recorded.
    pub trajectory: Option<Vec<Vec<f64>>>,
    /// Snapshot-round records, when recorded.
    pub snapshots: Option<Vec<SnapshotRecord>>,
    /// Coarse rounds solved at the root, when recorded.
    pub coarse_rounds: Option<Vec<CoarseRound>>,
    /// Engine delivery trace, when enabled.
    pub trace: Option<Vec<String>>,
}

/// Failures of a solver run.
#[derive(Debug, Error)]
pub enum SolverError {
    /// Problem setup failed (typically a coarse factorization).
    #[error(transparent)]
    Problem(#[from] ProblemError),
    /// The message runtime failed (bad configuration or a stall).
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

/// Scatters owned subdomain values into a global vector.
pub(crate) fn assemble_global(ps: &ProblemSet, locals: &[Vec<f64>]) -> Vec<f64> {
    let mut x = vec![0.0; ps.n()];
    for (sub, xi) in ps.subdomains.iter().zip(locals) {
        for &s in &sub.owned_slots {
            x[sub.indices[s]] = xi[s];
        }
    }
    x
}

/// Exact relative residual norm of a global iterate.
pub(crate) fn relative_residual(a: &CsrMatrix, b: &[f64], x: &[f64]) -> f64 {
    let mut r = b.to_vec();
    a.spmv_sub(x, &mut r);
    norm2(&r) / norm2(b)
}

/// Synchronous convergence check: assembles the global iterate from the
/// owned entries of each rank's local vector and returns the exact relative
/// residual `‖b − Ax‖ / ‖b‖`.
///
/// The asynchronous drivers call this after every norm-test exit, because
/// the rolling all-reduce estimate they stop on is always a few rounds
/// stale; a run only counts as converged once this check agrees.
pub fn final_residual_check(locals: &[Vec<f64>], ps: &ProblemSet) -> f64 {
    let x = assemble_global(ps, locals);
    relative_residual(&ps.a, &ps.b, &x)
}

/// Shared update and residual kernels. Synchronous and asynchronous drivers
/// both call these so that equal inputs produce bit-equal iterates.
pub(crate) mod kernels {
    use super::*;

    /// Plain restricted update: `x += A_i^{-1} r`.
    pub fn plain_update(x: &mut [f64], factor: &SpdFactor, r: &[f64]) {
        let mut d = r.to_vec();
        factor.solve_in_place(&mut d);
        for (xs, ds) in x.iter_mut().zip(&d) {
            *xs += ds;
        }
    }

    /// Blended two-level update: `x += blend * (A_i^{-1} r + P_i x0)`,
    /// where `P_i` copies each slot's owning rank's coarse value.
    pub fn corrected_update(
        x: &mut [f64],
        factor: &SpdFactor,
        r: &[f64],
        x0: &[f64],
        coarse_slot: &[usize],
        blend: f64,
    ) {
        let mut d = r.to_vec();
        factor.solve_in_place(&mut d);
        for (s, xs) in x.iter_mut().enumerate() {
            *xs += blend * (d[s] + x0[coarse_slot[s]]);
        }
    }

    /// Local residual `r = b_i - A_i x - C_i halo`.
    pub fn residual_into(sub: &SubdomainProblem, x: &[f64], halo: &[f64], r: &mut Vec<f64>) {
        r.clone_from(&sub.b_local);
        sub.a_local.spmv_sub(x, r);
        sub.coupling.spmv_sub(halo, r);
    }

    /// Owned rows of the residual of a locally stored vector, in owned-slot
    /// order. Owned rows never couple to the halo (the decomposition keeps
    /// at least one overlap layer), so no ring values are needed.
    pub fn owned_rows_residual(sub: &SubdomainProblem, x: &[f64]) -> Vec<f64> {
        sub.owned_slots
            .iter()
            .map(|&row| {
                debug_assert!(
                    sub.coupling.row(row).next().is_none(),
                    "owned row {row} unexpectedly couples to the halo"
                );
                let mut acc = sub.b_local[row];
                for (col, v) in sub.a_local.row(row) {
                    acc -= v * x[col];
                }
                acc
            })
            .collect()
    }

    /// One payload per halo block: the send-slot values of `x`.
    pub fn halo_payloads(sub: &SubdomainProblem, x: &[f64]) -> Vec<Vec<f64>> {
        sub.halo_blocks
            .iter()
            .map(|hb| hb.send_slots.iter().map(|&s| x[s]).collect())
            .collect()
    }

    /// One payload per overlap-consistency block.
    pub fn sync_payloads(sub: &SubdomainProblem, x: &[f64]) -> Vec<Vec<f64>> {
        sub.sync_blocks
            .iter()
            .map(|sb| sb.send_slots.iter().map(|&s| x[s]).collect())
            .collect()
    }

    /// Scatters a flat overlap-exchange receive buffer into the non-owned
    /// slots of `x`. The buffer holds one segment per sync block, in block
    /// order, matching the engine's receive layout for the exchange.
    pub fn scatter_sync(sub: &SubdomainProblem, buf: &[f64], x: &mut [f64]) {
        let mut off = 0;
        for sb in &sub.sync_blocks {
            for (j, &s) in sb.recv_slots.iter().enumerate() {
                x[s] = buf[off + j];
            }
            off += sb.recv_slots.len();
        }
        debug_assert_eq!(off, buf.len(), "receive buffer does not match the sync blocks");
    }

    /// Per-slot coarse index: the owning rank of each local slot.
    pub fn coarse_slot_map(ps: &ProblemSet, rank: usize) -> Vec<usize> {
        ps.subdomains[rank].indices.iter().map(|&g| ps.dec.owner[g]).collect()
    }

    /// Owned values of a local vector, in owned-slot order.
    pub fn owned_values(sub: &SubdomainProblem, x: &[f64]) -> Vec<f64> {
        sub.owned_slots.iter().map(|&s| x[s]).collect()
    }
}
