//! The event engine: envelopes, channels, requests, and collectives.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DelayModel, RuntimeError, RuntimeConfig, SchedulerMode};

/// Highest tag usable for point-to-point exchanges; larger tags are
/// reserved for collective traffic.
pub const MAX_P2P_TAG: u32 = 16;

const TAG_ALLREDUCE_UP: u32 = 100;
const TAG_ALLREDUCE_DOWN: u32 = 101;
const TAG_GATHER_UP: u32 = 102;
const TAG_BCAST_DOWN: u32 = 103;

/// Pseudo-rank used in traces for the collective aggregation point.
const ENGINE_NODE: i64 = -1;

/// One in-flight message.
struct Envelope {
    at: u64,
    seq: u64,
    src: i64,
    dst: i64,
    tag: u32,
    round: u64,
    payload: Vec<f64>,
    notify: Option<(usize, u64)>,
}

impl PartialEq for Envelope {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}
impl Eq for Envelope {}
impl PartialOrd for Envelope {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Envelope {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed so the BinaryHeap pops the earliest (tick, seq) first.
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Handle for a posted operation. Obtained from the `post_*` methods of
/// [`RankCtx`]; polled (and on completion consumed) by [`RankCtx::test`].
#[derive(Debug)]
pub struct Request {
    idx: usize,
    gen: u64,
    rank: usize,
}

impl Request {
    /// The null request: tests as complete with an empty result.
    pub fn null() -> Request {
        Request { idx: usize::MAX, gen: 0, rank: usize::MAX }
    }

    /// True for the null request.
    pub fn is_null(&self) -> bool {
        self.idx == usize::MAX
    }
}

/// Result carried by a completed request.
#[derive(Debug, Clone, PartialEq)]
pub enum Completion {
    /// Completion with no payload (exchanges, contribution handoff).
    Empty,
    /// A reduced scalar (allreduce).
    Scalar(f64),
    /// A vector (gather result at the root, broadcast payload).
    Vector(Vec<f64>),
}

impl Completion {
    /// Unwraps a scalar completion.
    pub fn scalar(self) -> f64 {
        match self {
            Completion::Scalar(v) => v,
            other => panic!("expected a scalar completion, got {other:?}"),
        }
    }

    /// Unwraps a vector completion.
    pub fn vector(self) -> Vec<f64> {
        match self {
            Completion::Vector(v) => v,
            other => panic!("expected a vector completion, got {other:?}"),
        }
    }
}

enum SlotKind {
    Exchange {
        tag: u32,
        pending_sends: usize,
        /// Required cumulative arrival count per peer channel.
        targets: Vec<(usize, u64)>,
    },
    AllReduce {
        round: u64,
    },
    GatherRoot {
        round: u64,
    },
    GatherContrib {
        pending: usize,
    },
    BcastRecv {
        round: u64,
    },
}

struct Slot {
    rank: usize,
    gen: u64,
    kind: SlotKind,
}

struct ExchangePeer {
    peer: usize,
    send_len: usize,
}

struct Exchange {
    peers: Vec<ExchangePeer>,
    by_src: HashMap<usize, (usize, usize)>,
    buf: Vec<f64>,
    arrivals: HashMap<usize, u64>,
    posts: u64,
}

struct AllReduceState {
    parts: Vec<usize>,
    pending: HashMap<u64, (f64, usize)>,
    inbox: Vec<HashMap<u64, f64>>,
    posts: Vec<u64>,
    outstanding: Vec<bool>,
}

struct GatherState {
    contributors: Vec<usize>,
    root: usize,
    acc: HashMap<u64, (Vec<f64>, usize)>,
    posts: Vec<u64>,
}

struct BcastState {
    root: usize,
    receivers: Vec<usize>,
    inbox: Vec<HashMap<u64, Vec<f64>>>,
    posts: Vec<u64>,
}

/// Statistics of a completed run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunStats {
    /// Tick at which the last required rank finished.
    pub ticks: u64,
    /// Total messages delivered.
    pub delivered: u64,
}

/// What a rank reports after a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    /// The rank wants to keep stepping.
    Running,
    /// The rank is finished and must not be stepped again.
    Done,
}

/// A rank's state machine. `step` is called with a context scoped to the
/// rank; one call should do a bounded amount of work (one phase), posting
/// and polling requests rather than waiting.
pub trait RankProgram {
    /// Advance by one phase.
    fn step(&mut self, ctx: &mut RankCtx<'_>) -> Progress;

    /// Auxiliary ranks (for example a dedicated coarse server) do not have
    /// to finish for the run to end.
    fn is_auxiliary(&self) -> bool {
        false
    }
}

/// The discrete-event engine.
pub struct Engine {
    ranks: usize,
    mode: SchedulerMode,
    p2p: DelayModel,
    coll: DelayModel,
    p2p_rng: ChaCha8Rng,
    coll_rng: ChaCha8Rng,
    sched_rng: ChaCha8Rng,
    tick: u64,
    seq: u64,
    heap: BinaryHeap<Envelope>,
    chan_last: HashMap<(i64, i64, u32), u64>,
    exchanges: Vec<HashMap<u32, Exchange>>,
    allreduce: Option<AllReduceState>,
    gather: Option<GatherState>,
    bcast: Option<BcastState>,
    slots: Vec<Option<Slot>>,
    gens: Vec<u64>,
    free_list: Vec<usize>,
    auto_free: Vec<usize>,
    trace: Option<Vec<String>>,
    stall_window: u64,
    last_activity: u64,
    delivered: u64,
}

impl Engine {
    /// Builds an engine from a validated configuration.
    pub fn new(cfg: &RuntimeConfig) -> Result<Engine, RuntimeError> {
        if cfg.ranks == 0 {
            return Err(RuntimeError::BadConfig("at least one rank is required".into()));
        }
        if cfg.stall_window == 0 {
            return Err(RuntimeError::BadConfig("stall window must be positive".into()));
        }
        cfg.p2p_delay.validate()?;
        cfg.collective_delay.validate()?;
        Ok(Engine {
            ranks: cfg.ranks,
            mode: cfg.mode,
            p2p: cfg.p2p_delay,
            coll: cfg.collective_delay,
            p2p_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15),
            coll_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x2545_f491_4f6c_dd1d),
            sched_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xda94_2042_e4dd_58b5),
            tick: 0,
            seq: 0,
            heap: BinaryHeap::new(),
            chan_last: HashMap::new(),
            exchanges: (0..cfg.ranks).map(|_| HashMap::new()).collect(),
            allreduce: None,
            gather: None,
            bcast: None,
            slots: Vec::new(),
            gens: Vec::new(),
            free_list: Vec::new(),
            auto_free: Vec::new(),
            trace: cfg.trace.then(Vec::new),
            stall_window: cfg.stall_window,
            last_activity: 0,
            delivered: 0,
        })
    }

    /// Registers a point-to-point exchange pattern for `(rank, tag)`. The
    /// peer order fixes both the payload order expected by
    /// [`RankCtx::post_exchange`] and the block layout of the receive
    /// buffer.
    pub fn register_exchange(&mut self, rank: usize, tag: u32, peers: &[(usize, usize, usize)]) {
        assert!(rank < self.ranks, "rank {rank} out of range");
        assert!(tag <= MAX_P2P_TAG, "tag {tag} reserved for collectives");
        let mut by_src = HashMap::new();
        let mut list = Vec::with_capacity(peers.len());
        let mut off = 0;
        for &(peer, send_len, recv_len) in peers {
            assert!(peer < self.ranks && peer != rank, "bad peer {peer} for rank {rank}");
            let dup = by_src.insert(peer, (off, recv_len));
            assert!(dup.is_none(), "peer {peer} listed twice for rank {rank} tag {tag}");
            list.push(ExchangePeer { peer, send_len });
            off += recv_len;
        }
        let prev = self.exchanges[rank].insert(
            tag,
            Exchange {
                peers: list,
                by_src,
                buf: vec![0.0; off],
                arrivals: HashMap::new(),
                posts: 0,
            },
        );
        assert!(prev.is_none(), "exchange ({rank}, {tag}) registered twice");
    }

    /// Registers the participant set of the sum-allreduce.
    pub fn register_allreduce(&mut self, participants: &[usize]) {
        assert!(self.allreduce.is_none(), "allreduce registered twice");
        let parts = check_rank_set(participants, self.ranks);
        self.allreduce = Some(AllReduceState {
            pending: HashMap::new(),
            inbox: (0..self.ranks).map(|_| HashMap::new()).collect(),
            posts: vec![0; self.ranks],
            outstanding: vec![false; self.ranks],
            parts,
        });
    }

    /// Registers the gather: `contributors` send scalars that arrive at
    /// `root` as a vector in contributor order.
    pub fn register_gather(&mut self, contributors: &[usize], root: usize) {
        assert!(self.gather.is_none(), "gather registered twice");
        assert!(root < self.ranks, "gather root {root} out of range");
        let contributors = check_rank_set(contributors, self.ranks);
        self.gather = Some(GatherState {
            contributors,
            root,
            acc: HashMap::new(),
            posts: vec![0; self.ranks],
        });
    }

    /// Registers the broadcast from `root` to `receivers`. An empty
    /// receiver set is allowed (a lone root broadcasts to nobody).
    pub fn register_bcast(&mut self, root: usize, receivers: &[usize]) {
        assert!(self.bcast.is_none(), "broadcast registered twice");
        assert!(root < self.ranks, "broadcast root {root} out of range");
        let mut receivers = receivers.to_vec();
        receivers.sort_unstable();
        receivers.dedup();
        assert!(receivers.last().map_or(true, |&r| r < self.ranks), "receiver out of range");
        assert!(
            receivers.binary_search(&root).is_err(),
            "broadcast root {root} cannot also receive"
        );
        self.bcast = Some(BcastState {
            root,
            receivers,
            inbox: (0..self.ranks).map(|_| HashMap::new()).collect(),
            posts: vec![0; self.ranks],
        });
    }

    /// Runs the programs to completion. `programs[r]` is rank `r`.
    pub fn run<P: RankProgram>(&mut self, programs: &mut [P]) -> Result<RunStats, RuntimeError> {
        assert_eq!(programs.len(), self.ranks, "one program per rank");
        let required: Vec<usize> = programs
            .iter()
            .enumerate()
            .filter_map(|(r, p)| (!p.is_auxiliary()).then_some(r))
            .collect();
        assert!(!required.is_empty(), "every rank is auxiliary; nothing to run");

        let mut done = vec![false; self.ranks];
        let mut perm: Vec<usize> = (0..self.ranks).collect();
        let mut pos = self.ranks;
        self.last_activity = self.tick;

        loop {
            self.deliver_due();
            self.sweep_auto_free();
            if self.tick - self.last_activity > self.stall_window {
                return Err(RuntimeError::Stall { tick: self.tick, window: self.stall_window });
            }
            match self.mode {
                SchedulerMode::Lockstep => {
                    for r in 0..self.ranks {
                        if done[r] {
                            continue;
                        }
                        let mut ctx = RankCtx { eng: self, rank: r };
                        if let Progress::Done = programs[r].step(&mut ctx) {
                            done[r] = true;
                            self.last_activity = self.tick;
                        }
                    }
                }
                SchedulerMode::FreeRunning => {
                    let r = loop {
                        if pos == perm.len() {
                            perm.shuffle(&mut self.sched_rng);
                            pos = 0;
                        }
                        let c = perm[pos];
                        pos += 1;
                        if !done[c] {
                            break c;
                        }
                    };
                    let mut ctx = RankCtx { eng: self, rank: r };
                    if let Progress::Done = programs[r].step(&mut ctx) {
                        done[r] = true;
                        self.last_activity = self.tick;
                    }
                }
            }
            if required.iter().all(|&r| done[r]) {
                return Ok(RunStats { ticks: self.tick, delivered: self.delivered });
            }
            self.tick += 1;
        }
    }

    /// Delivery trace, when tracing was enabled: one `tick,src,dst,tag,seq`
    /// line per delivered message (`-1` is the collective aggregation
    /// point).
    pub fn trace(&self) -> Option<&[String]> {
        self.trace.as_deref()
    }

    /// Number of live request slots (for liveness checks in tests).
    pub fn live_requests(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    fn send(
        &mut self,
        src: i64,
        dst: i64,
        tag: u32,
        round: u64,
        payload: Vec<f64>,
        collective: bool,
        notify: Option<(usize, u64)>,
    ) {
        let d = if collective {
            self.coll.draw(&mut self.coll_rng)
        } else {
            self.p2p.draw(&mut self.p2p_rng)
        };
        let key = (src, dst, tag);
        let mut at = self.tick + d;
        if let Some(&last) = self.chan_last.get(&key) {
            at = at.max(last);
        }
        self.chan_last.insert(key, at);
        self.seq += 1;
        self.heap.push(Envelope { at, seq: self.seq, src, dst, tag, round, payload, notify });
        self.last_activity = self.tick;
    }

    fn deliver_due(&mut self) {
        while let Some(top) = self.heap.peek() {
            if top.at > self.tick {
                break;
            }
            let env = self.heap.pop().unwrap();
            self.deliver(env);
        }
    }

    fn deliver(&mut self, env: Envelope) {
        if let Some(trace) = &mut self.trace {
            trace.push(format!("{},{},{},{},{}", self.tick, env.src, env.dst, env.tag, env.seq));
        }
        self.delivered += 1;
        self.last_activity = self.tick;

        if let Some((idx, gen)) = env.notify {
            if let Some(slot) = self.slots[idx].as_mut() {
                if slot.gen == gen {
                    match &mut slot.kind {
                        SlotKind::Exchange { pending_sends, .. } => *pending_sends -= 1,
                        SlotKind::GatherContrib { pending } => *pending -= 1,
                        _ => unreachable!("notify on a non-send request"),
                    }
                }
            }
        }

        match env.tag {
            t if t <= MAX_P2P_TAG => {
                let dst = env.dst as usize;
                let src = env.src as usize;
                let ex = self.exchanges[dst]
                    .get_mut(&t)
                    .unwrap_or_else(|| panic!("delivery to unregistered exchange ({dst}, {t})"));
                let &(off, len) = ex
                    .by_src
                    .get(&src)
                    .unwrap_or_else(|| panic!("rank {dst} has no peer {src} on tag {t}"));
                assert_eq!(env.payload.len(), len, "payload length mismatch on ({src}->{dst}, {t})");
                ex.buf[off..off + len].copy_from_slice(&env.payload);
                *ex.arrivals.entry(src).or_insert(0) += 1;
            }
            TAG_ALLREDUCE_UP => {
                let state = self.allreduce.as_mut().expect("allreduce not registered");
                let entry = state.pending.entry(env.round).or_insert((0.0, 0));
                entry.0 += env.payload[0];
                entry.1 += 1;
                if entry.1 == state.parts.len() {
                    let (sum, _) = state.pending.remove(&env.round).unwrap();
                    let parts = state.parts.clone();
                    for part in parts {
                        self.send(
                            ENGINE_NODE,
                            part as i64,
                            TAG_ALLREDUCE_DOWN,
                            env.round,
                            vec![sum],
                            true,
                            None,
                        );
                    }
                }
            }
            TAG_ALLREDUCE_DOWN => {
                let state = self.allreduce.as_mut().expect("allreduce not registered");
                state.inbox[env.dst as usize].insert(env.round, env.payload[0]);
            }
            TAG_GATHER_UP => {
                let state = self.gather.as_mut().expect("gather not registered");
                let pos = state
                    .contributors
                    .binary_search(&(env.src as usize))
                    .expect("gather contribution from a non-contributor");
                let n = state.contributors.len();
                let entry = state.acc.entry(env.round).or_insert_with(|| (vec![0.0; n], 0));
                entry.0[pos] = env.payload[0];
                entry.1 += 1;
            }
            TAG_BCAST_DOWN => {
                let state = self.bcast.as_mut().expect("broadcast not registered");
                state.inbox[env.dst as usize].insert(env.round, env.payload);
            }
            other => unreachable!("unknown tag {other}"),
        }
    }

    fn alloc_slot(&mut self, rank: usize, kind: SlotKind) -> Request {
        let idx = match self.free_list.pop() {
            Some(idx) => idx,
            None => {
                self.slots.push(None);
                self.gens.push(0);
                self.slots.len() - 1
            }
        };
        self.gens[idx] += 1;
        let gen = self.gens[idx];
        self.slots[idx] = Some(Slot { rank, gen, kind });
        Request { idx, gen, rank }
    }

    /// Pure completion check; does not consume results.
    fn check_complete(&self, slot: &Slot) -> bool {
        match &slot.kind {
            SlotKind::Exchange { tag, pending_sends, targets } => {
                if *pending_sends > 0 {
                    return false;
                }
                let ex = &self.exchanges[slot.rank][tag];
                targets
                    .iter()
                    .all(|&(src, need)| ex.arrivals.get(&src).copied().unwrap_or(0) >= need)
            }
            SlotKind::AllReduce { round } => {
                self.allreduce.as_ref().unwrap().inbox[slot.rank].contains_key(round)
            }
            SlotKind::GatherRoot { round } => {
                let g = self.gather.as_ref().unwrap();
                g.acc.get(round).map_or(false, |(_, cnt)| *cnt == g.contributors.len())
            }
            SlotKind::GatherContrib { pending } => *pending == 0,
            SlotKind::BcastRecv { round } => {
                self.bcast.as_ref().unwrap().inbox[slot.rank].contains_key(round)
            }
        }
    }

    /// Consumes the result of a completed slot and frees it.
    fn take_result(&mut self, idx: usize) -> Completion {
        let slot = self.slots[idx].take().expect("slot vanished");
        self.free_list.push(idx);
        match slot.kind {
            SlotKind::Exchange { .. } | SlotKind::GatherContrib { .. } => Completion::Empty,
            SlotKind::AllReduce { round } => {
                let state = self.allreduce.as_mut().unwrap();
                state.outstanding[slot.rank] = false;
                Completion::Scalar(state.inbox[slot.rank].remove(&round).unwrap())
            }
            SlotKind::GatherRoot { round } => {
                let state = self.gather.as_mut().unwrap();
                Completion::Vector(state.acc.remove(&round).unwrap().0)
            }
            SlotKind::BcastRecv { round } => {
                let state = self.bcast.as_mut().unwrap();
                Completion::Vector(state.inbox[slot.rank].remove(&round).unwrap())
            }
        }
    }

    fn sweep_auto_free(&mut self) {
        if self.auto_free.is_empty() {
            return;
        }
        let list = std::mem::take(&mut self.auto_free);
        for idx in list {
            let complete = match self.slots[idx].as_ref() {
                Some(slot) => self.check_complete(slot),
                None => continue,
            };
            if complete {
                let _ = self.take_result(idx);
            } else {
                self.auto_free.push(idx);
            }
        }
    }
}

fn check_rank_set(set: &[usize], ranks: usize) -> Vec<usize> {
    let mut v = set.to_vec();
    v.sort_unstable();
    v.dedup();
    assert_eq!(v.len(), set.len(), "rank set contains duplicates");
    assert!(!v.is_empty(), "rank set is empty");
    assert!(*v.last().unwrap() < ranks, "rank set member out of range");
    v
}

/// Per-rank view of the engine, passed to [`RankProgram::step`].
pub struct RankCtx<'a> {
    eng: &'a mut Engine,
    rank: usize,
}

impl RankCtx<'_> {
    /// This rank's id.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Current tick.
    pub fn tick(&self) -> u64 {
        self.eng.tick
    }

    /// Receive buffer of a registered exchange: the per-peer blocks in
    /// registration order, holding the latest delivered values (zeros
    /// before the first delivery).
    pub fn recv_buffer(&self, tag: u32) -> &[f64] {
        &self.eng.exchanges[self.rank]
            .get(&tag)
            .unwrap_or_else(|| panic!("exchange ({}, {tag}) not registered", self.rank))
            .buf
    }

    /// Posts one round of a registered exchange. `payloads` must line up
    /// with the registered peers. The request completes once every send has
    /// been delivered and every peer's send for the same round has arrived.
    pub fn post_exchange(&mut self, tag: u32, payloads: &[Vec<f64>]) -> Request {
        let rank = self.rank;
        let ex = self.eng.exchanges[rank]
            .get_mut(&tag)
            .unwrap_or_else(|| panic!("exchange ({rank}, {tag}) not registered"));
        assert_eq!(payloads.len(), ex.peers.len(), "one payload per registered peer");
        let round = ex.posts;
        ex.posts += 1;
        let targets: Vec<(usize, u64)> = ex.peers.iter().map(|p| (p.peer, round + 1)).collect();
        let sends: Vec<(usize, usize)> = ex.peers.iter().map(|p| (p.peer, p.send_len)).collect();
        let req = self.eng.alloc_slot(
            rank,
            SlotKind::Exchange { tag, pending_sends: sends.len(), targets },
        );
        for ((peer, send_len), payload) in sends.into_iter().zip(payloads) {
            assert_eq!(payload.len(), send_len, "send payload length for peer {peer}");
            self.eng.send(
                rank as i64,
                peer as i64,
                tag,
                round,
                payload.clone(),
                false,
                Some((req.idx, req.gen)),
            );
        }
        req
    }

    /// Posts this rank's contribution to the next allreduce round. Panics
    /// if the previous round's request is still outstanding.
    pub fn post_allreduce(&mut self, value: f64) -> Request {
        let rank = self.rank;
        let state = self.eng.allreduce.as_mut().expect("allreduce not registered");
        assert!(
            state.parts.binary_search(&rank).is_ok(),
            "rank {rank} is not an allreduce participant"
        );
        assert!(!state.outstanding[rank], "rank {rank} already has an allreduce outstanding");
        state.outstanding[rank] = true;
        let round = state.posts[rank];
        state.posts[rank] += 1;
        let req = self.eng.alloc_slot(rank, SlotKind::AllReduce { round });
        self.eng.send(rank as i64, ENGINE_NODE, TAG_ALLREDUCE_UP, round, vec![value], true, None);
        req
    }

    /// Posts this rank's contribution to the next gather round. At the
    /// root (when the root is also a contributor) the value is deposited
    /// instantly and the returned request completes once all contributions
    /// have arrived, yielding the gathered vector; elsewhere the request
    /// completes when the contribution has been delivered.
    pub fn post_gather(&mut self, value: f64) -> Request {
        let rank = self.rank;
        let state = self.eng.gather.as_mut().expect("gather not registered");
        let pos = state
            .contributors
            .binary_search(&rank)
            .unwrap_or_else(|_| panic!("rank {rank} is not a gather contributor"));
        let round = state.posts[rank];
        state.posts[rank] += 1;
        if rank == state.root {
            let n = state.contributors.len();
            let entry = state.acc.entry(round).or_insert_with(|| (vec![0.0; n], 0));
            entry.0[pos] = value;
            entry.1 += 1;
            self.eng.last_activity = self.eng.tick;
            self.eng.alloc_slot(rank, SlotKind::GatherRoot { round })
        } else {
            let root = state.root as i64;
            let req = self.eng.alloc_slot(rank, SlotKind::GatherContrib { pending: 1 });
            self.eng.send(
                rank as i64,
                root,
                TAG_GATHER_UP,
                round,
                vec![value],
                true,
                Some((req.idx, req.gen)),
            );
            req
        }
    }

    /// Waits for the next gather round at a root that contributes nothing
    /// itself (the dedicated coarse server).
    pub fn post_gather_root_wait(&mut self) -> Request {
        let rank = self.rank;
        let state = self.eng.gather.as_mut().expect("gather not registered");
        assert_eq!(rank, state.root, "rank {rank} is not the gather root");
        assert!(
            state.contributors.binary_search(&rank).is_err(),
            "contributing root must use post_gather"
        );
        let round = state.posts[rank];
        state.posts[rank] += 1;
        self.eng.alloc_slot(rank, SlotKind::GatherRoot { round })
    }

    /// Broadcasts `value` from the root. The payload is captured at the
    /// call; the operation is complete for the root immediately, so this
    /// returns the null request.
    pub fn post_bcast_root(&mut self, value: &[f64]) -> Request {
        let rank = self.rank;
        let state = self.eng.bcast.as_mut().expect("broadcast not registered");
        assert_eq!(rank, state.root, "rank {rank} is not the broadcast root");
        let round = state.posts[rank];
        state.posts[rank] += 1;
        let receivers = state.receivers.clone();
        for dst in receivers {
            self.eng.send(
                rank as i64,
                dst as i64,
                TAG_BCAST_DOWN,
                round,
                value.to_vec(),
                true,
                None,
            );
        }
        Request::null()
    }

    /// Posts the receive side of the next broadcast round.
    pub fn post_bcast_recv(&mut self) -> Request {
        let rank = self.rank;
        let state = self.eng.bcast.as_mut().expect("broadcast not registered");
        assert!(
            state.receivers.binary_search(&rank).is_ok(),
            "rank {rank} is not a broadcast receiver"
        );
        let round = state.posts[rank];
        state.posts[rank] += 1;
        self.eng.alloc_slot(rank, SlotKind::BcastRecv { round })
    }

    /// Polls a request. `None` means still pending. On completion the
    /// result is returned, the slot is released, and the handle becomes
    /// null. The null request always tests complete (with an empty
    /// result). Panics on a handle that was already consumed or freed, or
    /// that belongs to another rank.
    pub fn test(&mut self, req: &mut Request) -> Option<Completion> {
        if req.is_null() {
            return Some(Completion::Empty);
        }
        assert_eq!(req.rank, self.rank, "request belongs to rank {}", req.rank);
        let slot = self.eng.slots[req.idx]
            .as_ref()
            .filter(|s| s.gen == req.gen)
            .unwrap_or_else(|| panic!("request handle is stale (already consumed or freed)"));
        if !self.eng.check_complete(slot) {
            return None;
        }
        let result = self.eng.take_result(req.idx);
        *req = Request::null();
        Some(result)
    }

    /// Releases a request without waiting for it: the engine completes it
    /// in the background and drops the result. Used for fire-and-forget
    /// halo pushes.
    pub fn free(&mut self, req: Request) {
        if req.is_null() {
            return;
        }
        assert_eq!(req.rank, self.rank, "request belongs to rank {}", req.rank);
        let slot = self.eng.slots[req.idx]
            .as_ref()
            .filter(|s| s.gen == req.gen)
            .unwrap_or_else(|| panic!("request handle is stale (already consumed or freed)"));
        if self.eng.check_complete(slot) {
            let _ = self.eng.take_result(req.idx);
        } else {
            self.eng.auto_free.push(req.idx);
        }
    }

    /// Number of live request slots in the engine (diagnostic).
    pub fn live_requests(&self) -> usize {
        self.eng.live_requests()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{DelayModel, RuntimeConfig, RuntimeError, SchedulerMode};

    fn cfg(
        ranks: usize,
        mode: SchedulerMode,
        p2p: DelayModel,
        coll: DelayModel,
        seed: u64,
    ) -> RuntimeConfig {
        RuntimeConfig::new(ranks, mode, p2p, coll, seed)
    }

    /// Posts one allreduce per round and records the completed sums.
    struct AllReducer {
        vals: Vec<f64>,
        got: Vec<f64>,
        req: Request,
        posted: bool,
        round: usize,
        last_tick: u64,
    }

    impl AllReducer {
        fn new(vals: Vec<f64>) -> AllReducer {
            AllReducer { vals, got: Vec::new(), req: Request::null(), posted: false, round: 0, last_tick: 0 }
        }
    }

    impl RankProgram for AllReducer {
        fn step(&mut self, ctx: &mut RankCtx<'_>) -> Progress {
            if !self.posted {
                self.req = ctx.post_allreduce(self.vals[self.round]);
                self.posted = true;
                return Progress::Running;
            }
            if let Some(c) = ctx.test(&mut self.req) {
                self.got.push(c.scalar());
                self.last_tick = ctx.tick();
                self.round += 1;
                self.posted = false;
                if self.round == self.vals.len() {
                    return Progress::Done;
                }
            }
            Progress::Running
        }
    }

    fn run_allreduce(mode: SchedulerMode, seed: u64, trace: bool) -> (Vec<AllReducer>, Option<Vec<String>>) {
        let mut c = cfg(4, mode, DelayModel::Uniform(0, 7), DelayModel::Uniform(0, 20), seed);
        c.trace = trace;
        let mut eng = Engine::new(&c).unwrap();
        eng.register_allreduce(&[0, 1, 2, 3]);
        let mut progs: Vec<AllReducer> =
            (0..4).map(|r| AllReducer::new(vec![(r + 1) as f64; 5])).collect();
        eng.run(&mut progs).unwrap();
        let trace = eng.trace().map(|t| t.to_vec());
        (progs, trace)
    }

    #[test]
    fn zero_ranks_is_rejected() {
        let c = cfg(0, SchedulerMode::Lockstep, DelayModel::Immediate, DelayModel::Immediate, 1);
        assert!(matches!(Engine::new(&c), Err(RuntimeError::BadConfig(_))));
    }

    #[test]
    fn uniform_bounds_out_of_order_are_rejected() {
        let c = cfg(1, SchedulerMode::Lockstep, DelayModel::Uniform(5, 2), DelayModel::Immediate, 1);
        assert!(matches!(Engine::new(&c), Err(RuntimeError::BadConfig(_))));
    }

    #[test]
    fn allreduce_sums_every_round_in_both_modes() {
        for mode in [SchedulerMode::Lockstep, SchedulerMode::FreeRunning] {
            let (progs, _) = run_allreduce(mode, 42, false);
            for p in &progs {
                assert_eq!(p.got, vec![10.0; 5], "{mode:?}");
            }
        }
    }

    #[test]
    fn single_rank_allreduce_completes_after_two_legs() {
        let c = cfg(1, SchedulerMode::Lockstep, DelayModel::Immediate, DelayModel::Immediate, 7);
        let mut eng = Engine::new(&c).unwrap();
        eng.register_allreduce(&[0]);
        let mut progs = vec![AllReducer::new(vec![5.0])];
        eng.run(&mut progs).unwrap();
        assert_eq!(progs[0].got, vec![5.0]);
        assert_eq!(progs[0].last_tick, 2); // up leg at tick 1, down leg at tick 2
    }

    #[test]
    fn same_seed_reproduces_the_trace() {
        let (_, t1) = run_allreduce(SchedulerMode::FreeRunning, 9, true);
        let (_, t2) = run_allreduce(SchedulerMode::FreeRunning, 9, true);
        let (_, t3) = run_allreduce(SchedulerMode::FreeRunning, 10, true);
        assert_eq!(t1, t2);
        assert_ne!(t1, t3);
    }

    struct DoublePost;

    impl RankProgram for DoublePost {
        fn step(&mut self, ctx: &mut RankCtx<'_>) -> Progress {
            let _a = ctx.post_allreduce(1.0);
            let _b = ctx.post_allreduce(2.0);
            Progress::Done
        }
    }

    #[test]
    #[should_panic(expected = "already has an allreduce outstanding")]
    fn outstanding_allreduce_cannot_be_reposted() {
        let c = cfg(1, SchedulerMode::Lockstep, DelayModel::Immediate, DelayModel::Immediate, 1);
        let mut eng = Engine::new(&c).unwrap();
        eng.register_allreduce(&[0]);
        eng.run(&mut [DoublePost]).unwrap();
    }

    enum GatherRole {
        Contributor(f64),
        ContributingRoot(f64),
    }

    struct Gatherer {
        role: GatherRole,
        req: Request,
        posted: bool,
        got: Option<(Vec<f64>, u64)>,
    }

    impl Gatherer {
        fn new(role: GatherRole) -> Gatherer {
            Gatherer { role, req: Request::null(), posted: false, got: None }
        }
    }

    impl RankProgram for Gatherer {
        fn step(&mut self, ctx: &mut RankCtx<'_>) -> Progress {
            if !self.posted {
                let v = match &self.role {
                    GatherRole::Contributor(v) | GatherRole::ContributingRoot(v) => *v,
                };
                self.req = ctx.post_gather(v);
                self.posted = true;
                return Progress::Running;
            }
            if let Some(c) = ctx.test(&mut self.req) {
                if let GatherRole::ContributingRoot(_) = self.role {
                    self.got = Some((c.vector(), ctx.tick()));
                }
                return Progress::Done;
            }
            Progress::Running
        }
    }

    #[test]
    fn gather_collects_contributions_in_rank_order() {
        let c = cfg(2, SchedulerMode::Lockstep, DelayModel::Immediate, DelayModel::Fixed(5), 3);
        let mut eng = Engine::new(&c).unwrap();
        eng.register_gather(&[0, 1], 0);
        let mut progs = vec![
            Gatherer::new(GatherRole::ContributingRoot(5.0)),
            Gatherer::new(GatherRole::Contributor(7.0)),
        ];
        eng.run(&mut progs).unwrap();
        let (vec, tick) = progs[0].got.clone().unwrap();
        assert_eq!(vec, vec![5.0, 7.0]);
        // The remote contribution takes the fixed collective latency.
        assert_eq!(tick, 5);
    }

    struct BcastRoot {
        payload: Vec<f64>,
    }

    impl RankProgram for BcastRoot {
        fn step(&mut self, ctx: &mut RankCtx<'_>) -> Progress {
            let req = ctx.post_bcast_root(&self.payload);
            assert!(req.is_null(), "root broadcast completes at the post");
            self.payload[0] = 99.0; // must not affect what receivers see
            Progress::Done
        }
    }

    struct BcastReceiver {
        req: Request,
        posted: bool,
        got: Option<Vec<f64>>,
    }

    impl BcastReceiver {
        fn new() -> BcastReceiver {
            BcastReceiver { req: Request::null(), posted: false, got: None }
        }
    }

    impl RankProgram for BcastReceiver {
        fn step(&mut self, ctx: &mut RankCtx<'_>) -> Progress {
            if !self.posted {
                self.req = ctx.post_bcast_recv();
                self.posted = true;
                return Progress::Running;
            }
            if let Some(c) = ctx.test(&mut self.req) {
                self.got = Some(c.vector());
                return Progress::Done;
            }
            Progress::Running
        }
    }

    #[test]
    fn broadcast_captures_the_payload_at_the_post() {
        enum P {
            Root(BcastRoot),
            Recv(BcastReceiver),
        }
        impl RankProgram for P {
            fn step(&mut self, ctx: &mut RankCtx<'_>) -> Progress {
                match self {
                    P::Root(r) => r.step(ctx),
                    P::Recv(r) => r.step(ctx),
                }
            }
        }
        let c = cfg(3, SchedulerMode::Lockstep, DelayModel::Immediate, DelayModel::Uniform(1, 4), 11);
        let mut eng = Engine::new(&c).unwrap();
        eng.register_bcast(0, &[1, 2]);
        let mut progs = vec![
            P::Root(BcastRoot { payload: vec![1.0, 2.0] }),
            P::Recv(BcastReceiver::new()),
            P::Recv(BcastReceiver::new()),
        ];
        eng.run(&mut progs).unwrap();
        for p in &progs[1..] {
            match p {
                P::Recv(r) => assert_eq!(r.got.as_deref(), Some(&[1.0, 2.0][..])),
                P::Root(_) => unreachable!(),
            }
        }
    }

    /// Sends its iteration number to the peer each step, firing and
    /// forgetting; or watches its receive buffer and records what it sees.
    enum PingPong {
        Push { iters: usize, i: usize },
        Watch { steps: usize, i: usize, seen: Vec<f64> },
    }

    impl RankProgram for PingPong {
        fn step(&mut self, ctx: &mut RankCtx<'_>) -> Progress {
            match self {
                PingPong::Push { iters, i } => {
                    if *i == *iters {
                        return Progress::Done;
                    }
                    // 1-based so arrivals are distinguishable from the
                    // zero-initialized buffer.
                    let req = ctx.post_exchange(0, &[vec![(*i + 1) as f64]]);
                    ctx.free(req);
                    *i += 1;
                    Progress::Running
                }
                PingPong::Watch { steps, i, seen } => {
                    if *i == *steps {
                        return Progress::Done;
                    }
                    seen.push(ctx.recv_buffer(0)[0]);
                    *i += 1;
                    Progress::Running
                }
            }
        }
    }

    #[test]
    fn channel_delivery_is_fifo_with_latest_value_winning() {
        let c = cfg(2, SchedulerMode::Lockstep, DelayModel::Uniform(0, 9), DelayModel::Immediate, 21);
        let mut eng = Engine::new(&c).unwrap();
        eng.register_exchange(0, 0, &[(1, 1, 1)]);
        eng.register_exchange(1, 0, &[(0, 1, 1)]);
        let iters = 50;
        let mut progs = vec![
            PingPong::Push { iters, i: 0 },
            PingPong::Watch { steps: iters + 40, i: 0, seen: Vec::new() },
        ];
        eng.run(&mut progs).unwrap();
        let PingPong::Watch { seen, .. } = &progs[1] else { unreachable!() };
        for w in seen.windows(2) {
            assert!(w[1] >= w[0], "an older value overwrote a newer one: {w:?}");
        }
        assert_eq!(*seen.last().unwrap(), iters as f64, "last send never arrived");
    }

    #[test]
    fn fixed_delay_delivers_exactly_on_time() {
        let c = cfg(2, SchedulerMode::Lockstep, DelayModel::Fixed(3), DelayModel::Immediate, 2);
        let mut eng = Engine::new(&c).unwrap();
        eng.register_exchange(0, 0, &[(1, 1, 1)]);
        eng.register_exchange(1, 0, &[(0, 1, 1)]);
        let mut progs = vec![
            PingPong::Push { iters: 1, i: 0 },
            PingPong::Watch { steps: 8, i: 0, seen: Vec::new() },
        ];
        eng.run(&mut progs).unwrap();
        let PingPong::Watch { seen, .. } = &progs[1] else { unreachable!() };
        // The value is posted at tick 0 with latency 3, so the watcher sees
        // zeros at ticks 0..=2 and the payload from tick 3 on.
        assert_eq!(seen[..], [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    }

    struct Churn {
        iters: usize,
        i: usize,
        max_live: usize,
    }

    impl RankProgram for Churn {
        fn step(&mut self, ctx: &mut RankCtx<'_>) -> Progress {
            if self.i == self.iters {
                return Progress::Done;
            }
            let req = ctx.post_exchange(0, &[vec![self.i as f64]]);
            ctx.free(req);
            self.max_live = self.max_live.max(ctx.live_requests());
            self.i += 1;
            Progress::Running
        }
    }

    #[test]
    fn freed_exchange_requests_do_not_accumulate() {
        let c = cfg(2, SchedulerMode::Lockstep, DelayModel::Immediate, DelayModel::Immediate, 5);
        let mut eng = Engine::new(&c).unwrap();
        eng.register_exchange(0, 0, &[(1, 1, 1)]);
        eng.register_exchange(1, 0, &[(0, 1, 1)]);
        let iters = 100_000;
        let mut progs = vec![
            Churn { iters, i: 0, max_live: 0 },
            Churn { iters, i: 0, max_live: 0 },
        ];
        eng.run(&mut progs).unwrap();
        for p in &progs {
            assert!(p.max_live <= 8, "live requests grew to {}", p.max_live);
        }
        // Only the very last round (whose messages were still in flight
        // when the run ended) may survive.
        assert!(eng.live_requests() <= 2);
    }

    struct NullTester;

    impl RankProgram for NullTester {
        fn step(&mut self, ctx: &mut RankCtx<'_>) -> Progress {
            let mut null = Request::null();
            assert_eq!(ctx.test(&mut null), Some(Completion::Empty));
            assert!(null.is_null());
            // An exchange with no peers completes at the post.
            let mut req = ctx.post_exchange(0, &[]);
            assert_eq!(ctx.test(&mut req), Some(Completion::Empty));
            assert!(req.is_null(), "a consumed handle becomes null");
            Progress::Done
        }
    }

    #[test]
    fn null_requests_test_complete() {
        let c = cfg(1, SchedulerMode::Lockstep, DelayModel::Immediate, DelayModel::Immediate, 1);
        let mut eng = Engine::new(&c).unwrap();
        eng.register_exchange(0, 0, &[]);
        eng.run(&mut [NullTester]).unwrap();
        assert_eq!(eng.live_requests(), 0);
    }

    struct StaleTester;

    impl RankProgram for StaleTester {
        fn step(&mut self, ctx: &mut RankCtx<'_>) -> Progress {
            let mut req = ctx.post_exchange(0, &[]);
            ctx.test(&mut req).unwrap();
            // Forge a second handle to the slot that was just released.
            let mut stale = Request { idx: 0, gen: 1, rank: 0 };
            ctx.test(&mut stale);
            Progress::Done
        }
    }

    #[test]
    #[should_panic(expected = "stale")]
    fn consumed_requests_cannot_be_tested_again() {
        let c = cfg(1, SchedulerMode::Lockstep, DelayModel::Immediate, DelayModel::Immediate, 1);
        let mut eng = Engine::new(&c).unwrap();
        eng.register_exchange(0, 0, &[]);
        eng.run(&mut [StaleTester]).unwrap();
    }

    struct Forger {
        victim: Request,
    }

    impl RankProgram for Forger {
        fn step(&mut self, ctx: &mut RankCtx<'_>) -> Progress {
            if ctx.rank() == 0 {
                self.victim = ctx.post_allreduce(1.0);
                return Progress::Running;
            }
            // Rank 1 forges a handle to rank 0's request.
            let mut foreign = Request { idx: 0, gen: 1, rank: 0 };
            ctx.test(&mut foreign);
            Progress::Done
        }
    }

    #[test]
    #[should_panic(expected = "request belongs to rank 0")]
    fn requests_cannot_cross_ranks() {
        let c = cfg(2, SchedulerMode::Lockstep, DelayModel::Immediate, DelayModel::Immediate, 1);
        let mut eng = Engine::new(&c).unwrap();
        eng.register_allreduce(&[0, 1]);
        let mut progs = vec![
            Forger { victim: Request::null() },
            Forger { victim: Request::null() },
        ];
        eng.run(&mut progs).unwrap();
    }

    struct Waiter {
        req: Request,
        posted: bool,
    }

    impl RankProgram for Waiter {
        fn step(&mut self, ctx: &mut RankCtx<'_>) -> Progress {
            if ctx.rank() == 0 {
                // Never broadcasts: rank 1 waits forever.
                return Progress::Done;
            }
            if !self.posted {
                self.req = ctx.post_bcast_recv();
                self.posted = true;
                return Progress::Running;
            }
            match ctx.test(&mut self.req) {
                Some(_) => Progress::Done,
                None => Progress::Running,
            }
        }
    }

    #[test]
    fn the_watchdog_catches_a_stalled_run() {
        let mut c = cfg(2, SchedulerMode::Lockstep, DelayModel::Immediate, DelayModel::Immediate, 1);
        c.stall_window = 50;
        let mut eng = Engine::new(&c).unwrap();
        eng.register_bcast(0, &[1]);
        let mut progs = vec![
            Waiter { req: Request::null(), posted: false },
            Waiter { req: Request::null(), posted: false },
        ];
        let err = eng.run(&mut progs).unwrap_err();
        match err {
            RuntimeError::Stall { tick, window } => {
                assert_eq!(window, 50);
                assert!(tick <= 120, "stall detected far too late: {tick}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
