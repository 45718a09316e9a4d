//! Asynchronous two-level iterations.
//!
//! Both variants extend the one-level worker with a coarse machine that is
//! polled at the top of every update phase, before the local update: gather
//! the coarse right-hand side to a root (a designated worker, or a dedicated
//! extra rank), solve the aggregated coarse system there, and broadcast the
//! solution back. The machine's branches chain, so requests that are already
//! complete advance through several states in one pass — a lone rank runs
//! the whole gather/solve/broadcast cycle inside each update phase and every
//! update is corrected with the coarse solve of its own current residual.
//!
//! The basic variant reads its coarse right-hand side straight from the
//! possibly inconsistent local residuals and applies each received solution
//! in exactly one corrected update, in the same pass that completes the
//! broadcast. The accurate variant first freezes a snapshot of the iterate,
//! swaps snapshot values with its neighbors over the whole overlap
//! (round-matched, so every rank assembles the same global snapshot), and
//! derives the coarse right-hand side from that snapshot's residual, which
//! makes the gathered vector the exact coarse restriction of a single global
//! residual. Its updates always blend in the latest received solution — the
//! zero vector before the first broadcast lands, which makes the early
//! updates plain-but-damped and exempt from the cap — and each received
//! solution may serve up to `max_corr` consecutive updates while the next
//! round is in flight; past the cap the update falls back to the plain
//! one-level step.
//!
//! Coarse corrections make the residual history non-monotone, which widens
//! the gap between the rolling norm estimate and the true residual at the
//! moment of exit. As in the one-level driver, every norm-test exit is
//! confirmed with the exact synchronous check, and the loop resumes in
//! place when the check disagrees and rounds remain.

use crate::problem::{build_coarse, CoarseOperator, ProblemSet, SubdomainProblem};
use crate::runtime::{
    Completion, Progress, RankCtx, RankProgram, Request, RuntimeConfig, RuntimeError,
};
use crate::sparse::{norm2, SpdFactor};

use super::one_level::{assemble_trajectory, build_engine};
use super::{
    assemble_global, final_residual_check, kernels, CoarseRankMode, CoarseRound, RunReport,
    SnapshotRecord, SolverConfig, SolverError, Variant, TAG_X, TAG_XBAR, TAG_XSYNC,
};

/// Coarse-solving side of the root, shared by the inline worker and the
/// dedicated server.
struct CoarseRoot<'a> {
    co: &'a CoarseOperator,
    record: bool,
    solves: u64,
    rounds: Vec<CoarseRound>,
}

impl<'a> CoarseRoot<'a> {
    fn new(co: &'a CoarseOperator, record: bool) -> Self {
        CoarseRoot { co, record, solves: 0, rounds: Vec::new() }
    }

    /// Solves the gathered system and broadcasts the solution.
    fn solve_and_bcast(&mut self, r0: Vec<f64>, ctx: &mut RankCtx) -> Vec<f64> {
        let x0 = self.co.solve(&r0);
        self.solves += 1;
        if self.record {
            self.rounds.push(CoarseRound { r0, x0: x0.clone() });
        }
        let req = ctx.post_bcast_root(&x0);
        debug_assert!(req.is_null());
        x0
    }
}

/// State shared by both two-level workers: the fine-level iterate, its
/// residual, and the rolling residual-norm verdict. Identical to the
/// one-level worker's cycle, plus correction bookkeeping.
struct Common<'a> {
    sub: &'a SubdomainProblem,
    factor: &'a SpdFactor,
    coarse_slot: Vec<usize>,
    threshold: f64,
    k_max: u64,
    blend: f64,
    record_trajectory: bool,
    x: Vec<f64>,
    r: Vec<f64>,
    phase_update: bool,
    posted_norm: bool,
    norm_req: Request,
    verdict: Option<bool>,
    k_rounds: u64,
    k_local: u64,
    corrections: u64,
    versions: u64,
    per_version: Vec<u64>,
    trajectory: Vec<Vec<f64>>,
}

impl<'a> Common<'a> {
    fn new(ps: &'a ProblemSet, rank: usize, cfg: &SolverConfig, norm_b: f64) -> Self {
        let sub = &ps.subdomains[rank];
        Common {
            sub,
            factor: &ps.factors[rank],
            coarse_slot: kernels::coarse_slot_map(ps, rank),
            threshold: (cfg.eps * norm_b) * (cfg.eps * norm_b),
            k_max: cfg.k_max,
            blend: cfg.blend,
            record_trajectory: cfg.record_trajectory,
            x: vec![0.0; sub.n_local()],
            r: sub.b_local.clone(),
            phase_update: true,
            posted_norm: false,
            norm_req: Request::null(),
            verdict: None,
            k_rounds: 0,
            k_local: 0,
            corrections: 0,
            versions: 0,
            per_version: Vec::new(),
            trajectory: Vec::new(),
        }
    }

    /// Posts the first residual-norm contribution, once.
    fn ensure_norm_posted(&mut self, ctx: &mut RankCtx) {
        if !self.posted_norm {
            self.norm_req = ctx.post_allreduce(self.sub.owned_energy(&self.r));
            self.posted_norm = true;
        }
    }

    /// The tail of the update phase, after the plain or corrected update:
    /// bookkeeping plus the fire-and-forget interface pushes.
    fn finish_update(&mut self, ctx: &mut RankCtx) {
        self.k_local += 1;
        if self.record_trajectory {
            self.trajectory.push(kernels::owned_values(self.sub, &self.x));
        }
        let req = ctx.post_exchange(TAG_X, &kernels::halo_payloads(self.sub, &self.x));
        ctx.free(req);
        let req = ctx.post_exchange(TAG_XSYNC, &kernels::sync_payloads(self.sub, &self.x));
        ctx.free(req);
        self.phase_update = false;
    }

    /// The residual phase: fold the arrived overlap values into the local
    /// iterate, rebuild the residual, and poll the rolling norm round.
    fn residual_and_verdict(&mut self, ctx: &mut RankCtx) {
        kernels::scatter_sync(self.sub, ctx.recv_buffer(TAG_XSYNC), &mut self.x);
        kernels::residual_into(self.sub, &self.x, ctx.recv_buffer(TAG_X), &mut self.r);
        if let Some(done) = ctx.test(&mut self.norm_req) {
            let sum = done.scalar();
            self.k_rounds += 1;
            self.norm_req = ctx.post_allreduce(self.sub.owned_energy(&self.r));
            if !sum.is_finite() {
                self.verdict = Some(false);
            } else if sum < self.threshold {
                self.verdict = Some(true);
            } else if self.k_rounds >= self.k_max {
                self.verdict = Some(false);
            }
        }
    }

    fn end_residual_phase(&mut self) -> Progress {
        self.phase_update = true;
        match self.verdict {
            Some(_) => Progress::Done,
            None => Progress::Running,
        }
    }
}

/// Basic two-level worker: coarse right-hand side from the raw local
/// residuals, each received solution used exactly once.
struct BasicWorker<'a> {
    c: Common<'a>,
    root: Option<CoarseRoot<'a>>,
    cstate: u8,
    c_req: Request,
    pending_x0: Option<Vec<f64>>,
}

impl<'a> BasicWorker<'a> {
    fn new(
        ps: &'a ProblemSet,
        rank: usize,
        cfg: &SolverConfig,
        norm_b: f64,
        root: Option<CoarseRoot<'a>>,
    ) -> Self {
        BasicWorker {
            c: Common::new(ps, rank, cfg, norm_b),
            root,
            cstate: 0,
            c_req: Request::null(),
            pending_x0: None,
        }
    }

    /// One poll of the coarse machine. Returns the solution whose broadcast
    /// completed in this pass, if any; the caller folds it into the update
    /// it is about to take, so adopting and applying are inseparable.
    fn advance_coarse(&mut self, ctx: &mut RankCtx) -> Option<Vec<f64>> {
        let mut adopted = None;
        if self.cstate == 0 {
            self.c_req = ctx.post_gather(self.c.sub.owned_sum(&self.c.r));
            self.cstate = 1;
        }
        if self.cstate == 1 {
            if let Some(done) = ctx.test(&mut self.c_req) {
                match self.root.as_mut() {
                    Some(root) => {
                        self.pending_x0 = Some(root.solve_and_bcast(done.vector(), ctx));
                        self.c_req = Request::null();
                    }
                    None => self.c_req = ctx.post_bcast_recv(),
                }
                self.cstate = 2;
            }
        }
        if self.cstate == 2 {
            if let Some(done) = ctx.test(&mut self.c_req) {
                adopted = Some(match done {
                    Completion::Vector(v) => v,
                    _ => self.pending_x0.take().expect("the root keeps its own solution"),
                });
                self.cstate = 0;
            }
        }
        adopted
    }
}

impl RankProgram for BasicWorker<'_> {
    fn step(&mut self, ctx: &mut RankCtx) -> Progress {
        if self.c.phase_update {
            self.c.ensure_norm_posted(ctx);
            match self.advance_coarse(ctx) {
                Some(x0) => {
                    kernels::corrected_update(
                        &mut self.c.x,
                        self.c.factor,
                        &self.c.r,
                        &x0,
                        &self.c.coarse_slot,
                        self.c.blend,
                    );
                    self.c.corrections += 1;
                    self.c.versions += 1;
                    self.c.per_version.push(1);
                }
                None => kernels::plain_update(&mut self.c.x, self.c.factor, &self.c.r),
            }
            self.c.finish_update(ctx);
            Progress::Running
        } else {
            self.c.residual_and_verdict(ctx);
            self.c.end_residual_phase()
        }
    }
}

/// Accurate two-level worker: coarse right-hand side from a round-matched
/// snapshot of the global iterate; every update blends in the latest
/// received solution, each solution serving at most `max_corr` updates.
struct AccurateWorker<'a> {
    c: Common<'a>,
    root: Option<CoarseRoot<'a>>,
    cstate: u8,
    c_req: Request,
    xbar: Vec<f64>,
    latest_x0: Vec<f64>,
    pending_x0: Option<Vec<f64>>,
    corr_used: u32,
    max_corr: u32,
    snap_round: u64,
    record_snapshots: bool,
    snapshots: Vec<SnapshotRecord>,
}

impl<'a> AccurateWorker<'a> {
    fn new(
        ps: &'a ProblemSet,
        rank: usize,
        cfg: &SolverConfig,
        norm_b: f64,
        root: Option<CoarseRoot<'a>>,
    ) -> Self {
        let mut c = Common::new(ps, rank, cfg, norm_b);
        // The leading entry records the damped updates taken with the
        // initial zero coarse vector; the reuse cap does not bind them.
        c.per_version.push(0);
        let n = c.x.len();
        AccurateWorker {
            c,
            root,
            cstate: 0,
            c_req: Request::null(),
            xbar: vec![0.0; n],
            latest_x0: vec![0.0; ps.p()],
            pending_x0: None,
            corr_used: 0,
            max_corr: cfg.max_corr,
            snap_round: 0,
            record_snapshots: cfg.record_snapshots,
            snapshots: Vec::new(),
        }
    }

    /// One poll of the snapshot/coarse machine.
    fn advance_coarse(&mut self, ctx: &mut RankCtx) {
        if self.cstate == 0 {
            self.xbar.clone_from(&self.c.x);
            self.c_req =
                ctx.post_exchange(TAG_XBAR, &kernels::sync_payloads(self.c.sub, &self.xbar));
            self.cstate = 1;
        }
        if self.cstate == 1 {
            if ctx.test(&mut self.c_req).is_some() {
                // The round-matched exchange has delivered every owner's
                // snapshot values; overwrite the non-owned overlap so the
                // snapshot agrees with the owners everywhere.
                kernels::scatter_sync(self.c.sub, ctx.recv_buffer(TAG_XBAR), &mut self.xbar);
                let rbar = kernels::owned_rows_residual(self.c.sub, &self.xbar);
                if self.record_snapshots {
                    self.snapshots.push(SnapshotRecord {
                        rank: self.c.sub.rank,
                        round: self.snap_round,
                        owned_x: kernels::owned_values(self.c.sub, &self.xbar),
                        owned_r: rbar.clone(),
                    });
                }
                self.c_req = ctx.post_gather(rbar.iter().sum());
                self.cstate = 2;
            }
        }
        if self.cstate == 2 {
            if let Some(done) = ctx.test(&mut self.c_req) {
                match self.root.as_mut() {
                    Some(root) => {
                        self.pending_x0 = Some(root.solve_and_bcast(done.vector(), ctx));
                        self.c_req = Request::null();
                    }
                    None => self.c_req = ctx.post_bcast_recv(),
                }
                self.cstate = 3;
            }
        }
        if self.cstate == 3 {
            if let Some(done) = ctx.test(&mut self.c_req) {
                self.latest_x0 = match done {
                    Completion::Vector(v) => v,
                    _ => self.pending_x0.take().expect("the root keeps its own solution"),
                };
                self.c.versions += 1;
                self.c.per_version.push(0);
                self.corr_used = 0;
                self.snap_round += 1;
                self.cstate = 0;
            }
        }
    }
}

impl RankProgram for AccurateWorker<'_> {
    fn step(&mut self, ctx: &mut RankCtx) -> Progress {
        if self.c.phase_update {
            self.c.ensure_norm_posted(ctx);
            self.advance_coarse(ctx);
            // Reuse counting starts with the first received solution; the
            // damped start with the zero vector is not held against the cap.
            let corrected = if self.c.versions == 0 {
                true
            } else if self.corr_used < self.max_corr {
                self.corr_used += 1;
                self.c.corrections += 1;
                true
            } else {
                false
            };
            if corrected {
                kernels::corrected_update(
                    &mut self.c.x,
                    self.c.factor,
                    &self.c.r,
                    &self.latest_x0,
                    &self.c.coarse_slot,
                    self.c.blend,
                );
                *self.c.per_version.last_mut().expect("the zero version is always present") += 1;
            } else {
                kernels::plain_update(&mut self.c.x, self.c.factor, &self.c.r);
            }
            self.c.finish_update(ctx);
            Progress::Running
        } else {
            self.c.residual_and_verdict(ctx);
            self.c.end_residual_phase()
        }
    }
}

/// Dedicated coarse server: repeatedly waits for a gathered right-hand
/// side, solves, broadcasts. Auxiliary, so the run ends with the workers.
struct CoarseServer<'a> {
    root: CoarseRoot<'a>,
    waiting: bool,
    req: Request,
}

impl<'a> CoarseServer<'a> {
    fn new(root: CoarseRoot<'a>) -> Self {
        CoarseServer { root, waiting: false, req: Request::null() }
    }
}

impl RankProgram for CoarseServer<'_> {
    fn step(&mut self, ctx: &mut RankCtx) -> Progress {
        if !self.waiting {
            self.req = ctx.post_gather_root_wait();
            self.waiting = true;
        }
        if let Some(done) = ctx.test(&mut self.req) {
            let _ = self.root.solve_and_bcast(done.vector(), ctx);
            self.waiting = false;
        }
        Progress::Running
    }

    fn is_auxiliary(&self) -> bool {
        true
    }
}

enum TwoLevelProgram<'a> {
    Basic(BasicWorker<'a>),
    Accurate(AccurateWorker<'a>),
    Server(CoarseServer<'a>),
}

impl TwoLevelProgram<'_> {
    /// The fine-level state of a worker program; the server has none.
    fn common(&self) -> Option<&Common<'_>> {
        match self {
            TwoLevelProgram::Basic(w) => Some(&w.c),
            TwoLevelProgram::Accurate(w) => Some(&w.c),
            TwoLevelProgram::Server(_) => None,
        }
    }

    /// Clears a settled norm verdict so the worker's loop carries on.
    fn clear_verdict(&mut self) {
        match self {
            TwoLevelProgram::Basic(w) => w.c.verdict = None,
            TwoLevelProgram::Accurate(w) => w.c.verdict = None,
            TwoLevelProgram::Server(_) => {}
        }
    }
}

impl RankProgram for TwoLevelProgram<'_> {
    fn step(&mut self, ctx: &mut RankCtx) -> Progress {
        match self {
            TwoLevelProgram::Basic(w) => w.step(ctx),
            TwoLevelProgram::Accurate(w) => w.step(ctx),
            TwoLevelProgram::Server(s) => s.step(ctx),
        }
    }

    fn is_auxiliary(&self) -> bool {
        matches!(self, TwoLevelProgram::Server(_))
    }
}

/// Runs the asynchronous two-level iteration with the raw-residual coarse
/// right-hand side (each coarse solution corrects exactly one update).
pub fn run_async_two_level_basic(
    ps: &ProblemSet,
    cfg: &SolverConfig,
    rcfg: &RuntimeConfig,
) -> Result<RunReport, SolverError> {
    run_async_two_level(ps, cfg, rcfg, false)
}

/// Runs the asynchronous two-level iteration with the snapshot-consistent
/// coarse right-hand side and `max_corr`-bounded reuse.
pub fn run_async_two_level_accurate(
    ps: &ProblemSet,
    cfg: &SolverConfig,
    rcfg: &RuntimeConfig,
) -> Result<RunReport, SolverError> {
    run_async_two_level(ps, cfg, rcfg, true)
}

fn run_async_two_level(
    ps: &ProblemSet,
    cfg: &SolverConfig,
    rcfg: &RuntimeConfig,
    accurate: bool,
) -> Result<RunReport, SolverError> {
    let p = ps.p();
    let dedicated = cfg.coarse_mode == CoarseRankMode::Dedicated;
    if !dedicated && cfg.i0 >= p {
        return Err(SolverError::Runtime(RuntimeError::BadConfig(format!(
            "inline coarse root {} is not a worker rank (p = {p})",
            cfg.i0
        ))));
    }
    let co = build_coarse(&ps.a, &ps.dec.owner, p)?;
    let ranks = if dedicated { p + 1 } else { p };

    let mut eng = build_engine(ps, rcfg, ranks)?;
    if accurate {
        for (i, sub) in ps.subdomains.iter().enumerate() {
            let peers: Vec<(usize, usize, usize)> = sub
                .sync_blocks
                .iter()
                .map(|sb| (sb.neighbor, sb.send_slots.len(), sb.recv_slots.len()))
                .collect();
            eng.register_exchange(i, TAG_XBAR, &peers);
        }
    }
    let workers: Vec<usize> = (0..p).collect();
    let (root_rank, receivers) = if dedicated {
        (p, workers.clone())
    } else {
        (cfg.i0, workers.iter().copied().filter(|&i| i != cfg.i0).collect())
    };
    eng.register_gather(&workers, root_rank);
    eng.register_bcast(root_rank, &receivers);

    let norm_b = norm2(&ps.b);
    let mut programs: Vec<TwoLevelProgram> = (0..p)
        .map(|i| {
            let root =
                (!dedicated && i == cfg.i0).then(|| CoarseRoot::new(&co, cfg.record_snapshots));
            if accurate {
                TwoLevelProgram::Accurate(AccurateWorker::new(ps, i, cfg, norm_b, root))
            } else {
                TwoLevelProgram::Basic(BasicWorker::new(ps, i, cfg, norm_b, root))
            }
        })
        .collect();
    if dedicated {
        programs.push(TwoLevelProgram::Server(CoarseServer::new(CoarseRoot::new(
            &co,
            cfg.record_snapshots,
        ))));
    }

    let mut stats = eng.run(&mut programs)?;

    // Confirm the approximate exit with the exact check; on a miss, clear
    // the verdicts and let the still-loaded engine carry the loop on. The
    // stale-contribution lag is wider here than in the one-level runs
    // because coarse corrections make the residual history non-monotone.
    let final_relres = loop {
        let locals: Vec<Vec<f64>> = programs
            .iter()
            .filter_map(|prog| prog.common().map(|c| c.x.clone()))
            .collect();
        let relres = final_residual_check(&locals, ps);
        let exited_norm = programs
            .iter()
            .filter_map(TwoLevelProgram::common)
            .all(|c| c.verdict == Some(true));
        let rounds = programs[0].common().expect("rank 0 is a worker").k_rounds;
        if !exited_norm || relres < cfg.eps || rounds >= cfg.k_max {
            break relres;
        }
        for prog in &mut programs {
            prog.clear_verdict();
        }
        stats = eng.run(&mut programs)?;
    };

    let mut locals = Vec::with_capacity(p);
    let mut k_local = Vec::with_capacity(p);
    let mut corrections = Vec::with_capacity(p);
    let mut versions = Vec::with_capacity(p);
    let mut per_version = Vec::with_capacity(p);
    let mut trajs = Vec::with_capacity(p);
    let mut snapshots = Vec::new();
    let mut k_rounds = 0;
    let mut exited_via_norm = true;
    let mut coarse_solves = 0;
    let mut coarse_rounds = None;
    for prog in programs {
        let (c, root, snaps) = match prog {
            TwoLevelProgram::Basic(w) => (w.c, w.root, Vec::new()),
            TwoLevelProgram::Accurate(w) => (w.c, w.root, w.snapshots),
            TwoLevelProgram::Server(s) => {
                coarse_solves = s.root.solves;
                coarse_rounds = cfg.record_snapshots.then_some(s.root.rounds);
                continue;
            }
        };
        if let Some(root) = root {
            coarse_solves = root.solves;
            coarse_rounds = cfg.record_snapshots.then_some(root.rounds);
        }
        k_rounds = c.k_rounds;
        exited_via_norm &= c.verdict == Some(true);
        locals.push(c.x);
        k_local.push(c.k_local);
        corrections.push(c.corrections);
        versions.push(c.versions);
        per_version.push(c.per_version);
        trajs.push(c.trajectory);
        snapshots.extend(snaps);
    }

    let xg = assemble_global(ps, &locals);
    Ok(RunReport {
        variant: if accurate { Variant::AsyncTwoLevelAccurate } else { Variant::AsyncTwoLevelBasic },
        p,
        converged: exited_via_norm && final_relres < cfg.eps,
        exited_via_norm,
        k_rounds,
        k_local,
        corrections,
        versions,
        per_version_corrections: per_version,
        coarse_solves,
        final_relres,
        x: xg,
        ticks: stats.ticks,
        trajectory: cfg.record_trajectory.then(|| assemble_trajectory(ps, &trajs)),
        snapshots: (accurate && cfg.record_snapshots).then_some(snapshots),
        coarse_rounds,
        trace: eng.trace().map(|t| t.to_vec()),
    })
}
