//! Deterministic discrete-event simulator.
//!
//! All nodes live in one process and one thread. Events are ordered by
//! `(time, sequence)`, node randomness is seeded from the run seed and the
//! node's name, and every message goes through the wire codec, so a run is
//! a pure function of its inputs: two runs with the same seed produce the
//! same trace digest.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Context, LinkClass, Observation, Process, Role, Tick, TopologyProfile};
use crate::error::{Error, Result};
use crate::wire::{self, Envelope, MessageKind};

/// Static facts about a simulated node.
#[derive(Clone, Debug)]
pub struct NodeInfo {
    pub role: Role,
    pub group: Option<String>,
}

impl NodeInfo {
    pub fn new(role: Role, group: Option<&str>) -> Self {
        NodeInfo { role, group: group.map(str::to_string) }
    }
}

/// One message as seen by the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub sent_at: Tick,
    /// `None` when the message was dropped.
    pub delivered_at: Option<Tick>,
    pub from: String,
    pub to: String,
    pub kind: MessageKind,
    pub bytes: usize,
    pub cause: u64,
    pub id: u64,
}

enum EventKind {
    Deliver { from: String, to: String, frame: Vec<u8>, cause: u64, trace_slot: Option<usize> },
    Timer { node: String, token: u64, incarnation: u64, cause: u64 },
}

struct Event {
    at: Tick,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (time, seq)
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

struct Slot {
    info: NodeInfo,
    process: Option<Box<dyn Process>>,
    up: bool,
    incarnation: u64,
    next_id: u64,
    rng: ChaCha8Rng,
}

struct Outgoing {
    to: String,
    env: Envelope,
    cause: u64,
}

struct SimCtx<'a> {
    now: Tick,
    me: &'a str,
    rng: &'a mut ChaCha8Rng,
    next_id: &'a mut u64,
    cause: u64,
    cause_counter: &'a mut u64,
    out: Vec<Outgoing>,
    timers: Vec<(Tick, u64, u64)>,
    observations: &'a mut Vec<(Tick, String, Observation)>,
}

impl Context for SimCtx<'_> {
    fn now(&self) -> Tick {
        self.now
    }

    fn me(&self) -> &str {
        self.me
    }

    fn send(&mut self, to: &str, env: Envelope) {
        self.out.push(Outgoing { to: to.to_string(), env, cause: self.cause });
    }

    fn set_timer(&mut self, delay: Tick, token: u64) {
        // timer-driven work is background traffic, not part of any request
        self.timers.push((delay, token, 0));
    }

    fn rng(&mut self) -> &mut dyn RngCore {
        self.rng
    }

    fn next_id(&mut self) -> u64 {
        *self.next_id += 1;
        *self.next_id
    }

    fn begin_cause(&mut self) -> u64 {
        *self.cause_counter += 1;
        self.cause = *self.cause_counter;
        self.cause
    }

    fn observe(&mut self, obs: Observation) {
        self.observations.push((self.now, self.me.to_string(), obs));
    }
}

/// The simulated network plus every node on it.
pub struct Sim {
    seed: u64,
    now: Tick,
    seq: u64,
    queue: BinaryHeap<Event>,
    pending_deliveries: usize,
    nodes: BTreeMap<String, Slot>,
    profile: TopologyProfile,
    link_free: HashMap<(String, String), Tick>,
    cuts: Vec<(BTreeSet<String>, BTreeSet<String>)>,
    digest: Sha256,
    records: Option<Vec<TraceRecord>>,
    sent_by_kind: BTreeMap<MessageKind, u64>,
    cause_counter: u64,
    observations: Vec<(Tick, String, Observation)>,
}

impl Sim {
    pub fn new(seed: u64, profile: TopologyProfile) -> Self {
        Sim {
            seed,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            pending_deliveries: 0,
            nodes: BTreeMap::new(),
            profile,
            link_free: HashMap::new(),
            cuts: Vec::new(),
            digest: Sha256::new(),
            records: None,
            sent_by_kind: BTreeMap::new(),
            cause_counter: 0,
            observations: Vec::new(),
        }
    }

    /// Keep every [`TraceRecord`] in memory (the digest is always kept).
    pub fn record_trace(&mut self, on: bool) {
        self.records = if on { Some(Vec::new()) } else { None };
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn profile(&self) -> TopologyProfile {
        self.profile
    }

    fn node_rng(&self, name: &str, incarnation: u64) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_be_bytes());
        h.update(incarnation.to_be_bytes());
        h.update(name.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    /// Registers a node and runs its `start` hook at the current time.
    pub fn add_node(&mut self, name: &str, info: NodeInfo, process: Box<dyn Process>) {
        assert!(!self.nodes.contains_key(name), "duplicate simulated node {name}");
        let rng = self.node_rng(name, 0);
        self.nodes.insert(
            name.to_string(),
            Slot { info, process: Some(process), up: true, incarnation: 0, next_id: 0, rng },
        );
        self.with_ctx(name, 0, |p, ctx| p.start(ctx));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.nodes.contains_key(name)
    }

    pub fn node_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }

    pub fn info(&self, name: &str) -> Option<&NodeInfo> {
        self.nodes.get(name).map(|s| &s.info)
    }

    pub fn is_up(&self, name: &str) -> bool {
        self.nodes.get(name).is_some_and(|s| s.up)
    }

    /// Stops a node: pending timers die with it, messages to it are dropped.
    /// Returns the process so the caller can inspect its last state.
    pub fn crash(&mut self, name: &str) -> Option<Box<dyn Process>> {
        let slot = self.nodes.get_mut(name)?;
        slot.up = false;
        slot.incarnation += 1;
        slot.process.take()
    }

    /// Brings a crashed node back with a fresh process (typically rebuilt
    /// from the crashed node's storage directory).
    pub fn restart(&mut self, name: &str, process: Box<dyn Process>) {
        let incarnation = self.nodes[name].incarnation;
        let rng = self.node_rng(name, incarnation);
        let slot = self.nodes.get_mut(name).expect("restart of unknown node");
        slot.up = true;
        slot.process = Some(process);
        slot.rng = rng;
        self.with_ctx(name, 0, |p, ctx| p.start(ctx));
    }

    /// Drops all traffic between the two sets until [`Sim::heal`].
    pub fn partition<A: AsRef<str>, B: AsRef<str>>(&mut self, side_a: &[A], side_b: &[B]) {
        let a: BTreeSet<String> = side_a.iter().map(|s| s.as_ref().to_string()).collect();
        let b: BTreeSet<String> = side_b.iter().map(|s| s.as_ref().to_string()).collect();
        if !a.is_empty() && !b.is_empty() {
            self.cuts.push((a, b));
        }
    }

    /// Cuts `nodes` off from every other node.
    pub fn isolate<A: AsRef<str>>(&mut self, nodes: &[A]) {
        let inside: BTreeSet<&str> = nodes.iter().map(|s| s.as_ref()).collect();
        let rest: Vec<String> = self.nodes.keys().filter(|n| !inside.contains(n.as_str())).cloned().collect();
        self.partition(nodes, &rest);
    }

    pub fn heal(&mut self) {
        self.cuts.clear();
    }

    fn cut(&self, a: &str, b: &str) -> bool {
        self.cuts.iter().any(|(x, y)| (x.contains(a) && y.contains(b)) || (x.contains(b) && y.contains(a)))
    }

    fn push(&mut self, at: Tick, kind: EventKind) {
        self.seq += 1;
        if matches!(kind, EventKind::Deliver { .. }) {
            self.pending_deliveries += 1;
        }
        self.queue.push(Event { at, seq: self.seq, kind });
    }

    fn with_ctx<R>(&mut self, name: &str, cause: u64, f: impl FnOnce(&mut dyn Process, &mut dyn Context) -> R) -> Option<R> {
        let now = self.now;
        let slot = self.nodes.get_mut(name)?;
        if !slot.up {
            return None;
        }
        let mut process = slot.process.take()?;
        let incarnation = slot.incarnation;
        let mut ctx = SimCtx {
            now,
            me: name,
            rng: &mut slot.rng,
            next_id: &mut slot.next_id,
            cause,
            cause_counter: &mut self.cause_counter,
            out: Vec::new(),
            timers: Vec::new(),
            observations: &mut self.observations,
        };
        let result = f(process.as_mut(), &mut ctx);
        let SimCtx { out, timers, .. } = ctx;
        if let Some(slot) = self.nodes.get_mut(name) {
            if slot.incarnation == incarnation && slot.process.is_none() {
                slot.process = Some(process);
            }
        }
        for (delay, token, cause) in timers {
            self.push(now + delay, EventKind::Timer { node: name.to_string(), token, incarnation, cause });
        }
        for o in out {
            self.transmit(name, o);
        }
        Some(result)
    }

    fn transmit(&mut self, from: &str, o: Outgoing) {
        let kind = o.env.kind();
        let frame = wire::encode(&o.env).expect("outgoing message must encode");
        *self.sent_by_kind.entry(kind).or_default() += 1;
        let deliver_at = self.route(from, &o.to, frame.len());
        self.digest.update(self.now.to_be_bytes());
        self.digest.update(from.as_bytes());
        self.digest.update([0]);
        self.digest.update(o.to.as_bytes());
        self.digest.update([0]);
        self.digest.update(&frame);
        let trace_slot = self.records.as_mut().map(|r| {
            r.push(TraceRecord {
                sent_at: self.now,
                delivered_at: deliver_at,
                from: from.to_string(),
                to: o.to.clone(),
                kind,
                bytes: frame.len(),
                cause: o.cause,
                id: o.env.id,
            });
            r.len() - 1
        });
        if let Some(at) = deliver_at {
            self.push(at, EventKind::Deliver { from: from.to_string(), to: o.to, frame, cause: o.cause, trace_slot });
        }
    }

    /// Delivery time for a frame, or `None` if it is dropped at send time.
    fn route(&mut self, from: &str, to: &str, bytes: usize) -> Option<Tick> {
        let (src, dst) = (self.nodes.get(from)?, self.nodes.get(to)?);
        if self.cut(from, to) {
            return None;
        }
        if from == to {
            return Some(self.now);
        }
        let class = LinkClass::between(
            (src.info.role, src.info.group.as_deref()),
            (dst.info.role, dst.info.group.as_deref()),
        );
        let link = self.profile.link(class);
        let free = self.link_free.entry((from.to_string(), to.to_string())).or_insert(0);
        let start = (*free).max(self.now);
        let done = start + link.serialization_ticks(bytes);
        *free = done;
        Some(done + link.latency_ticks())
    }

    /// Processes the next event. Returns `false` when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(ev) = self.queue.pop() else {
            return false;
        };
        self.now = ev.at;
        match ev.kind {
            EventKind::Deliver { from, to, frame, cause, trace_slot } => {
                self.pending_deliveries -= 1;
                let alive = self.nodes.get(&to).is_some_and(|s| s.up) && !self.cut(&from, &to);
                if !alive {
                    if let (Some(records), Some(i)) = (self.records.as_mut(), trace_slot) {
                        records[i].delivered_at = None;
                    }
                    return true;
                }
                match wire::decode(&frame) {
                    Ok(wire::Decoded::Frame { envelope, .. }) => {
                        self.with_ctx(&to, cause, |p, ctx| p.on_message(ctx, &from, envelope));
                    }
                    other => tracing::warn!(?other, %from, %to, "dropping undecodable frame"),
                }
            }
            EventKind::Timer { node, token, incarnation, cause } => {
                if self.nodes.get(&node).is_some_and(|s| s.up && s.incarnation == incarnation) {
                    self.with_ctx(&node, cause, |p, ctx| p.on_timer(ctx, token));
                }
            }
        }
        true
    }

    /// Runs every event due at or before `deadline`, then parks the clock there.
    pub fn run_until(&mut self, deadline: Tick) {
        while self.queue.peek().is_some_and(|e| e.at <= deadline) {
            self.step();
        }
        self.now = self.now.max(deadline);
    }

    pub fn advance(&mut self, ticks: Tick) {
        self.run_until(self.now + ticks);
    }

    /// Runs until no message is in flight. Armed timers do not count, so a
    /// cluster with periodic heartbeats is quiescent between rounds.
    pub fn run_until_quiescent(&mut self, max_ticks: Tick) -> Result<Tick> {
        let start = self.now;
        while self.pending_deliveries > 0 {
            if self.queue.peek().is_some_and(|e| e.at > start + max_ticks) {
                self.now = start + max_ticks;
                return Err(Error::HorizonExceeded(max_ticks));
            }
            self.step();
        }
        Ok(self.now - start)
    }

    /// Runs until `done` holds, checking after every event.
    pub fn run_until_done(&mut self, max_ticks: Tick, mut done: impl FnMut(&Sim) -> bool) -> Result<Tick> {
        let start = self.now;
        let deadline = start + max_ticks;
        while !done(self) {
            if !self.queue.peek().is_some_and(|e| e.at <= deadline) {
                self.now = self.now.max(deadline);
                return if done(self) { Ok(self.now - start) } else { Err(Error::HorizonExceeded(max_ticks)) };
            }
            self.step();
        }
        Ok(self.now - start)
    }

    /// Calls into a node from outside, e.g. to make a client issue a request.
    pub fn invoke<T: Process, R>(&mut self, name: &str, f: impl FnOnce(&mut T, &mut dyn Context) -> R) -> Option<R> {
        self.with_ctx(name, 0, |p, ctx| {
            let t = p.as_any_mut().downcast_mut::<T>().expect("invoke on a node of another type");
            f(t, ctx)
        })
    }

    pub fn node<T: Process>(&self, name: &str) -> Option<&T> {
        self.nodes.get(name)?.process.as_ref()?.as_any().downcast_ref::<T>()
    }

    pub fn node_mut<T: Process>(&mut self, name: &str) -> Option<&mut T> {
        self.nodes.get_mut(name)?.process.as_mut()?.as_any_mut().downcast_mut::<T>()
    }

    /// Running digest of every send: time, endpoints and frame bytes.
    pub fn trace_digest(&self) -> [u8; 32] {
        self.digest.clone().finalize().into()
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.records.as_deref().unwrap_or(&[])
    }

    pub fn sent_by_kind(&self) -> &BTreeMap<MessageKind, u64> {
        &self.sent_by_kind
    }

    pub fn total_sent(&self) -> u64 {
        self.sent_by_kind.values().sum()
    }

    pub fn observations(&self) -> &[(Tick, String, Observation)] {
        &self.observations
    }

    /// Shuts every live node down cleanly.
    pub fn shutdown(&mut self) {
        for slot in self.nodes.values_mut() {
            if let Some(p) = slot.process.as_mut() {
                p.shutdown();
            }
        }
    }
}
