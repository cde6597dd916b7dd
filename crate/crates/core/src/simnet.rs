//! Deterministic discrete-event network and clock simulator.
//!
//! One event loop owns every actor. Time is integer microseconds, events at
//! the same instant run in insertion order, every directed link draws jitter
//! and loss from its own seeded stream, and per-link delivery is FIFO. The
//! same [`SimConfig`] and the same sequence of API calls always produce the
//! same [`Trace`].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt::{self, Debug, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{Digest256, Hasher};
use crate::model::{Micros, NodeId};

/// Open-ended partition window.
pub const FOREVER: Micros = Micros::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub base_latency: Micros,
    /// Jitter is uniform over `[0, jitter_max]`.
    pub jitter_max: Micros,
    pub drop_probability: f64,
}

impl Default for LinkSpec {
    fn default() -> Self {
        LinkSpec { base_latency: 100, jitter_max: 50, drop_probability: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    /// Directed links.
    pub links: BTreeMap<(NodeId, NodeId), LinkSpec>,
    /// Bound on each node's clock offset from true time.
    pub clock_sync_accuracy: Micros,
    /// Fixed offsets overriding the seeded draw.
    pub clock_offsets: BTreeMap<NodeId, i64>,
}

impl SimConfig {
    pub fn new(seed: u64) -> Self {
        SimConfig { seed, links: BTreeMap::new(), clock_sync_accuracy: 1, clock_offsets: BTreeMap::new() }
    }

    /// Adds a symmetric link.
    pub fn link(&mut self, a: NodeId, b: NodeId, spec: LinkSpec) -> &mut Self {
        self.links.insert((a, b), spec);
        self.links.insert((b, a), spec);
        self
    }

    /// Point-to-point links between every pair of `nodes` (a switch without
    /// contention).
    pub fn star(seed: u64, nodes: &[NodeId], spec: LinkSpec) -> Self {
        let mut cfg = SimConfig::new(seed);
        for (i, a) in nodes.iter().enumerate() {
            for b in &nodes[i + 1..] {
                cfg.link(*a, *b, spec);
            }
        }
        cfg
    }

    pub fn max_base_latency(&self) -> Micros {
        self.links.values().map(|l| l.base_latency).max().unwrap_or(0)
    }

    pub fn max_jitter(&self) -> Micros {
        self.links.values().map(|l| l.jitter_max).max().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("no link {0} -> {1}")]
    NoSuchLink(NodeId, NodeId),
    #[error("source {0} is not alive")]
    DeadSource(NodeId),
    #[error("node {0} is not alive")]
    DeadNode(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("partition groups overlap")]
    OverlappingGroups,
    #[error("partition window is empty")]
    EmptyWindow,
    #[error("clock offset override for {0} exceeds the accuracy bound")]
    OffsetOutOfBounds(NodeId),
    #[error("node {0} already exists")]
    DuplicateNode(NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Loss,
    Partition,
    DeadDestination,
    NoSuchLink,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind<N> {
    Deliver {
        src: NodeId,
        dst: NodeId,
        sent_at: Micros,
        #[serde(with = "hex::serde")]
        frame: Vec<u8>,
    },
    Drop {
        src: NodeId,
        dst: NodeId,
        sent_at: Micros,
        #[serde(with = "hex::serde")]
        frame: Vec<u8>,
        reason: DropReason,
    },
    NodeKill { node: NodeId },
    NodeRevive { node: NodeId },
    PartitionStart { a: Vec<NodeId>, b: Vec<NodeId> },
    PartitionEnd { a: Vec<NodeId>, b: Vec<NodeId> },
    TimerFire { node: NodeId, timer: u64 },
    /// A record produced by an actor while handling an event.
    Emit { node: NodeId, note: N },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimEvent<N> {
    pub time: Micros,
    #[serde(flatten)]
    pub kind: EventKind<N>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSnapshot<S> {
    pub alive: bool,
    pub clock_offset: i64,
    pub status: S,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace<N, S> {
    pub events: Vec<SimEvent<N>>,
    pub final_states: BTreeMap<NodeId, NodeSnapshot<S>>,
}

impl<N, S> Default for Trace<N, S> {
    fn default() -> Self {
        Trace { events: Vec::new(), final_states: BTreeMap::new() }
    }
}

impl<N: Debug, S: Debug> Trace<N, S> {
    /// Order-sensitive digest of the event list.
    pub fn digest(&self) -> Digest256 {
        events_digest(&self.events)
    }
}

pub fn events_digest<N: Debug>(events: &[SimEvent<N>]) -> Digest256 {
    let mut h = Hasher::new();
    for (i, e) in events.iter().enumerate() {
        let _ = writeln!(h, "{i}:{e:?}");
    }
    h.finish()
}

/// Side effects an actor asks for while handling one event.
#[derive(Debug)]
enum Effect<N> {
    Send { dst: NodeId, frame: Vec<u8> },
    /// Absolute true time.
    Timer { key: u64, at: Micros },
    Cancel { key: u64 },
    Note(N),
}

/// The view an actor has of the world while handling an event: its own
/// local clock and a way to emit effects.
pub struct Ctx<'a, N> {
    node: NodeId,
    now: Micros,
    offset: i64,
    effects: &'a mut Vec<Effect<N>>,
}

impl<N> Ctx<'_, N> {
    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn local_now(&self) -> Micros {
        apply_offset(self.now, self.offset)
    }

    pub fn send(&mut self, dst: NodeId, frame: Vec<u8>) {
        self.effects.push(Effect::Send { dst, frame });
    }

    /// Arms (or re-arms) timer `key` to fire after `delay`.
    pub fn set_timer_after(&mut self, key: u64, delay: Micros) {
        self.effects.push(Effect::Timer { key, at: self.now.saturating_add(delay) });
    }

    /// Arms timer `key` for a local clock reading; past readings fire now.
    pub fn set_timer_at_local(&mut self, key: u64, local: Micros) {
        let at = (i128::from(local) - i128::from(self.offset)).max(i128::from(self.now));
        let at = Micros::try_from(at).unwrap_or(Micros::MAX);
        self.effects.push(Effect::Timer { key, at });
    }

    pub fn cancel_timer(&mut self, key: u64) {
        self.effects.push(Effect::Cancel { key });
    }

    pub fn note(&mut self, note: N) {
        self.effects.push(Effect::Note(note));
    }
}

fn apply_offset(t: Micros, offset: i64) -> Micros {
    let v = i128::from(t) + i128::from(offset);
    Micros::try_from(v.max(0)).unwrap_or(Micros::MAX)
}

/// A state machine hosted on the simulator.
pub trait Actor {
    type Note: Clone + Debug;
    type Status: Clone + Debug;

    fn start(&mut self, ctx: &mut Ctx<'_, Self::Note>);
    fn on_frame(&mut self, ctx: &mut Ctx<'_, Self::Note>, src: NodeId, frame: &[u8]);
    fn on_timer(&mut self, ctx: &mut Ctx<'_, Self::Note>, key: u64);
    /// Resets to the boot state after a revive.
    fn restart(&mut self);
    fn status(&self) -> Self::Status;
}

#[derive(Debug)]
enum Pending {
    Start { node: NodeId },
    Transit { src: NodeId, dst: NodeId, sent_at: Micros, frame: Vec<u8>, lost: bool },
    Timer { node: NodeId, key: u64, generation: u64 },
    Kill { node: NodeId },
    Revive { node: NodeId },
    PartitionStart { index: usize },
    PartitionEnd { index: usize },
}

struct Slot<A> {
    actor: A,
    alive: bool,
    offset: i64,
    timers: BTreeMap<u64, u64>,
}

struct LinkState {
    spec: LinkSpec,
    rng: ChaCha8Rng,
    last_delivery: Micros,
}

#[derive(Clone, Debug)]
struct Partition {
    a: BTreeSet<NodeId>,
    b: BTreeSet<NodeId>,
    from: Micros,
    to: Micros,
}

impl Partition {
    fn separates(&self, x: NodeId, y: NodeId, at: Micros) -> bool {
        (self.from..self.to).contains(&at)
            && ((self.a.contains(&x) && self.b.contains(&y)) || (self.b.contains(&x) && self.a.contains(&y)))
    }
}

pub struct Simulator<A: Actor> {
    config: SimConfig,
    now: Micros,
    next_seq: u64,
    queue: BTreeMap<(Micros, u64), Pending>,
    nodes: BTreeMap<NodeId, Slot<A>>,
    links: BTreeMap<(NodeId, NodeId), LinkState>,
    partitions: Vec<Partition>,
    trace: Trace<A::Note, A::Status>,
}

/// splitmix64 finalizer over the inputs, used to derive independent streams.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.rotate_left(32);
    for _ in 0..2 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const OFFSET_STREAM: u64 = 0xC10C;

impl<A: Actor> Simulator<A> {
    pub fn new(config: SimConfig) -> Self {
        let links = config
            .links
            .iter()
            .map(|(&(src, dst), &spec)| {
                let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, src.0, dst.0));
                ((src, dst), LinkState { spec, rng, last_delivery: 0 })
            })
            .collect();
        Simulator {
            config,
            now: 0,
            next_seq: 0,
            queue: BTreeMap::new(),
            nodes: BTreeMap::new(),
            links,
            partitions: Vec::new(),
            trace: Trace::default(),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    /// Registers an actor; it starts at the current time.
    pub fn add_node(&mut self, id: NodeId, actor: A) -> Result<(), SimError> {
        if self.nodes.contains_key(&id) {
            return Err(SimError::DuplicateNode(id));
        }
        let acc = self.config.clock_sync_accuracy as i64;
        let offset = match self.config.clock_offsets.get(&id) {
            Some(&o) if o.unsigned_abs() > acc as u64 => return Err(SimError::OffsetOutOfBounds(id)),
            Some(&o) => o,
            None if acc == 0 => 0,
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, id.0, OFFSET_STREAM));
                rng.random_range(-acc..=acc)
            }
        };
        self.nodes.insert(id, Slot { actor, alive: true, offset, timers: BTreeMap::new() });
        self.schedule(self.now, Pending::Start { node: id });
        Ok(())
    }

    pub fn actor(&self, id: NodeId) -> Option<&A> {
        self.nodes.get(&id).map(|s| &s.actor)
    }

    pub fn actors(&self) -> impl Iterator<Item = (NodeId, &A)> {
        self.nodes.iter().map(|(id, s)| (*id, &s.actor))
    }

    pub fn is_alive(&self, id: NodeId) -> bool {
        self.nodes.get(&id).is_some_and(|s| s.alive)
    }

    pub fn clock_offset(&self, id: NodeId) -> Option<i64> {
        self.nodes.get(&id).map(|s| s.offset)
    }

    /// The node's local clock reading at `true_time`.
    pub fn local_clock(&self, node: NodeId, true_time: Micros) -> Result<Micros, SimError> {
        let slot = self.nodes.get(&node).ok_or(SimError::UnknownNode(node))?;
        if !slot.alive {
            return Err(SimError::DeadNode(node));
        }
        Ok(apply_offset(true_time, slot.offset))
    }

    /// Injects a frame on the `src -> dst` link at time `at`.
    pub fn send(&mut self, src: NodeId, dst: NodeId, frame: Vec<u8>, at: Micros) -> Result<Micros, SimError> {
        let slot = self.nodes.get(&src).ok_or(SimError::UnknownNode(src))?;
        if !slot.alive {
            return Err(SimError::DeadSource(src));
        }
        self.transmit(src, dst, frame, at.max(self.now))
    }

    fn transmit(&mut self, src: NodeId, dst: NodeId, frame: Vec<u8>, at: Micros) -> Result<Micros, SimError> {
        let link = self.links.get_mut(&(src, dst)).ok_or(SimError::NoSuchLink(src, dst))?;
        let jitter = if link.spec.jitter_max > 0 { link.rng.random_range(0..=link.spec.jitter_max) } else { 0 };
        let lost = link.spec.drop_probability > 0.0 && link.rng.random_bool(link.spec.drop_probability.min(1.0));
        let deliver = (at + link.spec.base_latency + jitter).max(link.last_delivery);
        link.last_delivery = deliver;
        self.schedule(deliver, Pending::Transit { src, dst, sent_at: at, frame, lost });
        Ok(deliver)
    }

    /// Drops every frame between the groups whose delivery falls in `[from, to)`.
    pub fn partition(&mut self, a: &[NodeId], b: &[NodeId], from: Micros, to: Micros) -> Result<(), SimError> {
        if from >= to {
            return Err(SimError::EmptyWindow);
        }
        let a: BTreeSet<NodeId> = a.iter().copied().collect();
        let b: BTreeSet<NodeId> = b.iter().copied().collect();
        if !a.is_disjoint(&b) {
            return Err(SimError::OverlappingGroups);
        }
        let index = self.partitions.len();
        self.partitions.push(Partition { a, b, from, to });
        self.schedule(from.max(self.now), Pending::PartitionStart { index });
        if to != FOREVER {
            self.schedule(to, Pending::PartitionEnd { index });
        }
        Ok(())
    }

    /// True if a partition separates the two nodes at `at`.
    pub fn partitioned(&self, x: NodeId, y: NodeId, at: Micros) -> bool {
        self.partitions.iter().any(|p| p.separates(x, y, at))
    }

    pub fn kill_node(&mut self, node: NodeId, at: Micros) -> Result<(), SimError> {
        if !self.nodes.contains_key(&node) {
            return Err(SimError::UnknownNode(node));
        }
        self.schedule(at.max(self.now), Pending::Kill { node });
        Ok(())
    }

    pub fn revive_node(&mut self, node: NodeId, at: Micros) -> Result<(), SimError> {
        if !self.nodes.contains_key(&node) {
            return Err(SimError::UnknownNode(node));
        }
        self.schedule(at.max(self.now), Pending::Revive { node });
        Ok(())
    }

    /// Runs `f` against a live actor at the current time, as if it had
    /// received a local command.
    pub fn invoke<R>(
        &mut self,
        node: NodeId,
        f: impl FnOnce(&mut A, &mut Ctx<'_, A::Note>) -> R,
    ) -> Result<R, SimError> {
        let slot = self.nodes.get_mut(&node).ok_or(SimError::UnknownNode(node))?;
        if !slot.alive {
            return Err(SimError::DeadNode(node));
        }
        let mut effects = Vec::new();
        let mut ctx = Ctx { node, now: self.now, offset: slot.offset, effects: &mut effects };
        let r = f(&mut slot.actor, &mut ctx);
        self.apply(node, effects);
        Ok(r)
    }

    /// Processes every event strictly before `t` and returns the trace.
    pub fn run_until(&mut self, t: Micros) -> &Trace<A::Note, A::Status> {
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 >= t {
                break;
            }
            let ((time, _), pending) = entry.remove_entry();
            self.now = time;
            self.dispatch(pending);
        }
        self.now = self.now.max(t);
        self.refresh_final_states();
        &self.trace
    }

    pub fn trace(&self) -> &Trace<A::Note, A::Status> {
        &self.trace
    }

    pub fn into_trace(mut self) -> Trace<A::Note, A::Status> {
        self.refresh_final_states();
        self.trace
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    fn refresh_final_states(&mut self) {
        self.trace.final_states = self
            .nodes
            .iter()
            .map(|(id, s)| (*id, NodeSnapshot { alive: s.alive, clock_offset: s.offset, status: s.actor.status() }))
            .collect();
    }

    fn schedule(&mut self, at: Micros, p: Pending) {
        self.queue.insert((at, self.next_seq), p);
        self.next_seq += 1;
    }

    fn record(&mut self, kind: EventKind<A::Note>) {
        self.trace.events.push(SimEvent { time: self.now, kind });
    }

    fn dispatch(&mut self, pending: Pending) {
        match pending {
            Pending::Start { node } => {
                if self.is_alive(node) {
                    self.with_actor(node, |a, ctx| a.start(ctx));
                }
            }
            Pending::Transit { src, dst, sent_at, frame, lost } => {
                let reason = if lost {
                    Some(DropReason::Loss)
                } else if self.partitioned(src, dst, self.now) {
                    Some(DropReason::Partition)
                } else if !self.is_alive(dst) {
                    Some(DropReason::DeadDestination)
                } else {
                    None
                };
                match reason {
                    Some(reason) => self.record(EventKind::Drop { src, dst, sent_at, frame, reason }),
                    None => {
                        self.record(EventKind::Deliver { src, dst, sent_at, frame: frame.clone() });
                        self.with_actor(dst, |a, ctx| a.on_frame(ctx, src, &frame));
                    }
                }
            }
            Pending::Timer { node, key, generation } => {
                let live = self
                    .nodes
                    .get(&node)
                    .is_some_and(|s| s.alive && s.timers.get(&key) == Some(&generation));
                if live {
                    self.record(EventKind::TimerFire { node, timer: key });
                    self.with_actor(node, |a, ctx| a.on_timer(ctx, key));
                }
            }
            Pending::Kill { node } => {
                let slot = self.nodes.get_mut(&node).expect("checked on schedule");
                if slot.alive {
                    slot.alive = false;
                    slot.timers.clear();
                    self.record(EventKind::NodeKill { node });
                }
            }
            Pending::Revive { node } => {
                let slot = self.nodes.get_mut(&node).expect("checked on schedule");
                if !slot.alive {
                    slot.alive = true;
                    slot.actor.restart();
                    self.record(EventKind::NodeRevive { node });
                    self.with_actor(node, |a, ctx| a.start(ctx));
                }
            }
            Pending::PartitionStart { index } | Pending::PartitionEnd { index } => {
                let p = &self.partitions[index];
                let (a, b) = (p.a.iter().copied().collect(), p.b.iter().copied().collect());
                let kind = if matches!(pending, Pending::PartitionStart { .. }) {
                    EventKind::PartitionStart { a, b }
                } else {
                    EventKind::PartitionEnd { a, b }
                };
                self.record(kind);
            }
        }
    }

    fn with_actor(&mut self, node: NodeId, f: impl FnOnce(&mut A, &mut Ctx<'_, A::Note>)) {
        let Some(slot) = self.nodes.get_mut(&node) else { return };
        let mut effects = Vec::new();
        let mut ctx = Ctx { node, now: self.now, offset: slot.offset, effects: &mut effects };
        f(&mut slot.actor, &mut ctx);
        self.apply(node, effects);
    }

    fn apply(&mut self, node: NodeId, effects: Vec<Effect<A::Note>>) {
        for effect in effects {
            match effect {
                Effect::Note(note) => self.record(EventKind::Emit { node, note }),
                Effect::Send { dst, frame } => {
                    if let Err(SimError::NoSuchLink(..)) = self.transmit(node, dst, frame.clone(), self.now) {
                        let (now, src) = (self.now, node);
                        self.record(EventKind::Drop { src, dst, sent_at: now, frame, reason: DropReason::NoSuchLink });
                    }
                }
                Effect::Timer { key, at } => {
                    // The queue sequence number is unique, so stale arms never match.
                    let generation = self.next_seq;
                    let slot = self.nodes.get_mut(&node).expect("actor exists");
                    slot.timers.insert(key, generation);
                    self.schedule(at, Pending::Timer { node, key, generation });
                }
                Effect::Cancel { key } => {
                    if let Some(slot) = self.nodes.get_mut(&node) {
                        slot.timers.remove(&key);
                    }
                }
            }
        }
    }
}

impl<A: Actor> fmt::Debug for Simulator<A> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Simulator")
            .field("now", &self.now)
            .field("nodes", &self.nodes.len())
            .field("pending", &self.queue.len())
            .finish()
    }
}
