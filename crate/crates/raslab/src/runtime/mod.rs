//! Deterministic discrete-event message runtime.
//!
//! Ranks are cooperative state machines driven by a single-threaded engine.
//! Time advances in integer ticks; at each tick boundary the engine delivers
//! every message that is due, then steps ranks according to the scheduler
//! mode. All latency draws and scheduling choices come from seeded counter
//! RNG streams, so a run is a pure function of its configuration: same seed,
//! same trace, same results.
//!
//! Messaging follows a non-blocking style: posts return [`Request`] handles
//! that are polled with `test`, halo exchanges write into per-tag receive
//! buffers (latest value wins), and collectives (sum-allreduce, gather to a
//! root, broadcast) are matched by per-rank round counters. Delivery on a
//! `(source, destination, tag)` channel is FIFO: a later message never
//! overtakes an earlier one.

mod engine;

pub use engine::{
    Completion, Engine, Progress, RankCtx, RankProgram, Request, RunStats,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Message latency model, in ticks. Every message spends at least one tick
/// in flight, so `Immediate` means "visible at the next tick boundary".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelayModel {
    /// Deliver at the next tick boundary.
    Immediate,
    /// Fixed latency.
    Fixed(u64),
    /// Latency drawn uniformly from `[lo, hi]`, inclusive.
    Uniform(u64, u64),
}

impl DelayModel {
    /// Draws an effective latency (at least one tick).
    fn draw(&self, rng: &mut ChaCha8Rng) -> u64 {
        let d = match *self {
            DelayModel::Immediate => 0,
            DelayModel::Fixed(t) => t,
            DelayModel::Uniform(lo, hi) => rng.gen_range(lo..=hi),
        };
        d.max(1)
    }

    fn validate(&self) -> Result<(), RuntimeError> {
        if let DelayModel::Uniform(lo, hi) = *self {
            if lo > hi {
                return Err(RuntimeError::BadConfig(format!(
                    "uniform delay bounds out of order: {lo} > {hi}"
                )));
            }
        }
        Ok(())
    }
}

/// How ranks are interleaved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerMode {
    /// Every live rank takes one step per tick, in rank order.
    Lockstep,
    /// One rank steps per tick, chosen by seeded random permutations so
    /// that every live rank steps once per round of `ranks` picks.
    FreeRunning,
}

/// Engine configuration.
#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    /// Total number of ranks, including any auxiliary ones.
    pub ranks: usize,
    /// Scheduling mode.
    pub mode: SchedulerMode,
    /// Latency model for point-to-point messages.
    pub p2p_delay: DelayModel,
    /// Latency model for collective legs.
    pub collective_delay: DelayModel,
    /// Seed for the delay and scheduling streams.
    pub seed: u64,
    /// Record a delivery trace.
    pub trace: bool,
    /// Abort with [`RuntimeError::Stall`] after this many ticks without any
    /// message activity or rank completion.
    pub stall_window: u64,
}

impl RuntimeConfig {
    /// A configuration with the default stall window and no tracing.
    pub fn new(
        ranks: usize,
        mode: SchedulerMode,
        p2p_delay: DelayModel,
        collective_delay: DelayModel,
        seed: u64,
    ) -> Self {
        RuntimeConfig {
            ranks,
            mode,
            p2p_delay,
            collective_delay,
            seed,
            trace: false,
            stall_window: 100_000,
        }
    }
}

/// Failures of the runtime itself (not of the programs it runs).
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuntimeError {
    /// The configuration is unusable.
    #[error("bad runtime configuration: {0}")]
    BadConfig(String),
    /// No message was delivered and no rank finished for a full stall
    /// window: some rank is polling a request that can never complete.
    #[error("no progress for {window} ticks (stalled at tick {tick})")]
    Stall {
        /// Tick at which the stall was declared.
        tick: u64,
        /// Width of the quiet period that triggered it.
        window: u64,
    },
}
