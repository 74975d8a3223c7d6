//! Chord overlay with virtual nodes.
//!
//! [`ChordNode`] is one overlay identity: predecessor, successor list and
//! finger table, maintained by periodic stabilize / fix_fingers /
//! check_predecessor rounds. Lookups are recursive: each hop forwards the
//! FindSuccessor to its closest preceding finger and the last hop answers
//! the origin directly.
//!
//! [`OverlayHost`] runs the virtual nodes of one physical gateway behind a
//! single address. Messages between its own vnodes never touch the network.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::ring::{Identifier, RingInterval, RingSpace};
use crate::transport::{ms, Context, Observation, Process, Tick};
use crate::wire::{
    Endpoint, Envelope, FindSuccessor, FindSuccessorResp, GetPredecessor, GetPredecessorResp, Message, NodeRef,
    Notify, Ping, Pong,
};

const TAG: u64 = 0xC << 60;
const TAG_MASK: u64 = 0xF << 60;
const KIND_MAINT: u64 = 1;
const KIND_RPC: u64 = 2;
const KIND_LOOKUP: u64 = 3;
const KIND_JOIN: u64 = 4;
const SEQ_MASK: u64 = (1 << 40) - 1;

fn token(vnode: usize, kind: u64, seq: u64) -> u64 {
    TAG | ((vnode as u64) << 48) | (kind << 40) | (seq & SEQ_MASK)
}

fn split_token(t: u64) -> (usize, u64, u64) {
    (((t >> 48) & 0xfff) as usize, (t >> 40) & 0xff, t & SEQ_MASK)
}

#[derive(Clone, Copy, Debug)]
pub struct ChordConfig {
    pub space: RingSpace,
    /// Successor list length.
    pub successors: usize,
    /// Period of stabilize, fix_fingers and check_predecessor.
    pub stabilize: Tick,
    /// An RPC with no answer after this long counts as a failure.
    pub rpc_timeout: Tick,
    /// Attempts per lookup before it fails.
    pub lookup_attempts: u32,
    pub join_attempts: u32,
    /// Delay between the joins of consecutive vnodes of one host.
    pub join_stagger: Tick,
}

impl Default for ChordConfig {
    fn default() -> Self {
        ChordConfig {
            space: RingSpace::default(),
            successors: 3,
            stabilize: ms(500),
            rpc_timeout: ms(1000),
            lookup_attempts: 3,
            join_attempts: 3,
            join_stagger: ms(100),
        }
    }
}

/// Builds the overlay identity of vnode `k` of `physical`.
pub fn vnode_ref(space: RingSpace, physical: &str, k: usize, address: &str) -> Result<NodeRef> {
    Ok(NodeRef {
        id: space.hash_id(vnode_name(physical, k).as_bytes())?,
        address: address.to_string(),
        physical_id: space.hash_id(physical.as_bytes())?,
    })
}

pub fn vnode_name(physical: &str, k: usize) -> String {
    format!("{physical}#{k}")
}

/// Why a lookup was started.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LookupFor {
    External(u64),
    Finger(u32),
}

struct Lookup {
    id: Identifier,
    purpose: LookupFor,
    attempts: u32,
}

#[derive(Clone, Debug)]
enum Rpc {
    Stabilize(NodeRef),
    PingPredecessor(NodeRef),
    PingFinger(NodeRef),
}

/// Something the host of a [`ChordNode`] may care about.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChordEvent {
    Located { waiter: u64, owner: NodeRef, hops: u32 },
    LookupFailed { waiter: u64 },
    Joined,
    JoinFailed,
    IdCollision(NodeRef),
    SuccessorChanged(NodeRef),
    /// Every successor is unreachable.
    Isolated,
}

pub struct ChordNode {
    me: NodeRef,
    index: usize,
    cfg: ChordConfig,
    predecessor: Option<NodeRef>,
    successors: Vec<NodeRef>,
    fingers: Vec<Option<NodeRef>>,
    next_finger: u32,
    next_ping: usize,
    joined: bool,
    join_attempt: u32,
    rpcs: BTreeMap<u64, Rpc>,
    lookups: BTreeMap<u64, Lookup>,
    lookup_seq: u64,
    events: Vec<ChordEvent>,
}

impl ChordNode {
    /// `index` is this vnode's slot within its host, used for timer routing.
    pub fn new(me: NodeRef, index: usize, cfg: ChordConfig) -> Self {
        ChordNode {
            successors: vec![me.clone()],
            fingers: vec![None; cfg.space.bits() as usize],
            me,
            index,
            cfg,
            predecessor: None,
            next_finger: 1,
            next_ping: 0,
            joined: false,
            join_attempt: 0,
            rpcs: BTreeMap::new(),
            lookups: BTreeMap::new(),
            lookup_seq: 0,
            events: Vec::new(),
        }
    }

    pub fn me(&self) -> &NodeRef {
        &self.me
    }

    pub fn id(&self) -> Identifier {
        self.me.id
    }

    pub fn predecessor(&self) -> Option<&NodeRef> {
        self.predecessor.as_ref()
    }

    pub fn successor(&self) -> &NodeRef {
        &self.successors[0]
    }

    pub fn successor_list(&self) -> &[NodeRef] {
        &self.successors
    }

    /// Finger `i` in `1..=m`.
    pub fn finger(&self, i: u32) -> Option<&NodeRef> {
        self.fingers.get(i as usize - 1).and_then(Option::as_ref)
    }

    pub fn fingers(&self) -> impl Iterator<Item = &NodeRef> {
        self.fingers.iter().flatten()
    }

    pub fn is_joined(&self) -> bool {
        self.joined
    }

    pub fn take_events(&mut self) -> Vec<ChordEvent> {
        std::mem::take(&mut self.events)
    }

    fn alone(&self) -> bool {
        self.successors[0].id == self.me.id
    }

    /// Whether this vnode is responsible for `id`, i.e. `id ∈ (pred, self]`.
    /// Unknown when the predecessor is not known yet, unless alone.
    pub fn owns(&self, id: Identifier) -> bool {
        match &self.predecessor {
            Some(p) => self.cfg.space.contains(RingInterval::open_closed(p.id, self.me.id), id),
            None => self.alone(),
        }
    }

    fn between(&self, a: Identifier, b: Identifier, x: Identifier) -> bool {
        self.cfg.space.contains(RingInterval::open(a, b), x)
    }

    fn between_right(&self, a: Identifier, b: Identifier, x: Identifier) -> bool {
        self.cfg.space.contains(RingInterval::open_closed(a, b), x)
    }

    /// The known node with the largest id in `(self, id)`, or self.
    pub fn closest_preceding(&self, id: Identifier) -> NodeRef {
        let mut best = &self.me;
        let mut best_d = 0;
        for c in self.fingers.iter().flatten().chain(self.successors.iter()) {
            if self.between(self.me.id, id, c.id) {
                let d = self.cfg.space.distance(self.me.id, c.id);
                if d > best_d {
                    best = c;
                    best_d = d;
                }
            }
        }
        best.clone()
    }

    fn send(&self, ctx: &mut dyn Context, to: &NodeRef, msg: impl Into<Message>) -> u64 {
        let id = ctx.next_id();
        ctx.send(&to.address, Envelope::new(id, msg));
        id
    }

    fn call(&mut self, ctx: &mut dyn Context, to: &NodeRef, msg: impl Into<Message>, rpc: Rpc) {
        let id = self.send(ctx, to, msg);
        self.rpcs.insert(id, rpc);
        ctx.set_timer(self.cfg.rpc_timeout, token(self.index, KIND_RPC, id));
    }

    /// Starts a one-node ring.
    pub fn create(&mut self, ctx: &mut dyn Context) {
        self.successors = vec![self.me.clone()];
        self.predecessor = None;
        self.become_joined(ctx);
    }

    /// Joins through a node at `bootstrap`. `target` is its id if known.
    pub fn join(&mut self, ctx: &mut dyn Context, bootstrap: &Endpoint, target: Option<Identifier>) {
        self.join_attempt += 1;
        let msg = FindSuccessor { target: target.unwrap_or(Identifier(0)), id: self.me.id, origin: self.me.clone(), hops: 1 };
        let id = ctx.next_id();
        ctx.send(bootstrap, Envelope::new(id, msg));
        ctx.set_timer(self.cfg.rpc_timeout * 2, token(self.index, KIND_JOIN, self.join_attempt as u64));
    }

    fn become_joined(&mut self, ctx: &mut dyn Context) {
        if self.joined {
            return;
        }
        self.joined = true;
        self.events.push(ChordEvent::Joined);
        ctx.observe(Observation::JoinedOverlay { id: self.me.id.to_hex() });
        let jitter = ctx.rng().random_range(0..self.cfg.stabilize.max(1));
        ctx.set_timer(jitter + 1, token(self.index, KIND_MAINT, 0));
    }

    /// Resolves the owner of `id`. The answer arrives as an event.
    pub fn locate(&mut self, ctx: &mut dyn Context, id: Identifier, waiter: u64) {
        self.start_lookup(ctx, id, LookupFor::External(waiter), 1);
    }

    fn start_lookup(&mut self, ctx: &mut dyn Context, id: Identifier, purpose: LookupFor, attempts: u32) {
        if let Some(owner) = self.local_answer(id) {
            self.finish_lookup(purpose, owner, 0);
            return;
        }
        let next = self.closest_preceding(id);
        let next = if next.id == self.me.id { self.successors[0].clone() } else { next };
        self.lookup_seq += 1;
        let seq = self.lookup_seq;
        self.lookups.insert(seq, Lookup { id, purpose, attempts });
        let msg = FindSuccessor { target: next.id, id, origin: self.me.clone(), hops: 1 };
        self.send(ctx, &next, msg);
        ctx.set_timer(self.cfg.rpc_timeout * 2, token(self.index, KIND_LOOKUP, seq));
    }

    /// Answers from local state when the owner is self or the successor.
    fn local_answer(&self, id: Identifier) -> Option<NodeRef> {
        if self.alone() || id == self.me.id || self.owns(id) && self.predecessor.is_some() {
            return Some(self.me.clone());
        }
        if self.between_right(self.me.id, self.successors[0].id, id) {
            return Some(self.successors[0].clone());
        }
        None
    }

    fn finish_lookup(&mut self, purpose: LookupFor, owner: NodeRef, hops: u32) {
        match purpose {
            LookupFor::External(waiter) => self.events.push(ChordEvent::Located { waiter, owner, hops }),
            LookupFor::Finger(i) => self.set_finger(i, owner),
        }
    }

    /// Sets finger `i`, and every later finger whose start also falls in
    /// `(self, owner]`, then moves the round-robin cursor past them.
    fn set_finger(&mut self, i: u32, owner: NodeRef) {
        let bits = self.cfg.space.bits();
        let mut j = i;
        while j <= bits {
            let start = self.cfg.space.finger_start(self.me.id, j).expect("finger index in range");
            if j != i && !self.between_right(self.me.id, owner.id, start) {
                break;
            }
            self.fingers[j as usize - 1] = Some(owner.clone());
            j += 1;
        }
        self.next_finger = if j > bits { 1 } else { j };
    }

    fn maintain(&mut self, ctx: &mut dyn Context) {
        ctx.set_timer(self.cfg.stabilize, token(self.index, KIND_MAINT, 0));
        self.stabilize(ctx);
        self.fix_next_finger(ctx);
        self.check_predecessor(ctx);
        self.ping_next_finger(ctx);
    }

    pub fn stabilize(&mut self, ctx: &mut dyn Context) {
        if self.alone() {
            // the successor's predecessor is our own predecessor
            if let Some(p) = self.predecessor.clone().filter(|p| p.id != self.me.id) {
                self.adopt_successor(p);
            }
            return;
        }
        if self.rpcs.values().any(|r| matches!(r, Rpc::Stabilize(_))) {
            return;
        }
        let succ = self.successors[0].clone();
        self.call(ctx, &succ, GetPredecessor { target: succ.id }, Rpc::Stabilize(succ.clone()));
    }

    fn adopt_successor(&mut self, s: NodeRef) {
        if s.id == self.successors[0].id {
            return;
        }
        self.successors.insert(0, s.clone());
        self.successors.retain(|n| n.id != self.me.id || n.id == s.id);
        self.dedup_successors();
        self.events.push(ChordEvent::SuccessorChanged(s));
    }

    fn dedup_successors(&mut self) {
        let mut seen = Vec::new();
        self.successors.retain(|n| {
            if seen.contains(&n.id) {
                false
            } else {
                seen.push(n.id);
                true
            }
        });
        self.successors.truncate(self.cfg.successors);
        if self.successors.is_empty() {
            self.successors.push(self.me.clone());
        }
    }

    fn on_stabilize_reply(&mut self, ctx: &mut dyn Context, succ: NodeRef, resp: GetPredecessorResp) {
        let mut list = vec![succ.clone()];
        if let Some(x) = resp.predecessor.clone() {
            if x.id != self.me.id && self.between(self.me.id, succ.id, x.id) {
                list.insert(0, x);
            }
        }
        list.extend(resp.successors.into_iter().filter(|n| n.id != self.me.id));
        let old = self.successors[0].id;
        self.successors = list;
        self.dedup_successors();
        if self.successors[0].id != old {
            self.events.push(ChordEvent::SuccessorChanged(self.successors[0].clone()));
        }
        let s = self.successors[0].clone();
        self.send(ctx, &s, Notify { target: s.id, candidate: self.me.clone() });
    }

    pub fn notify(&mut self, candidate: NodeRef) {
        if candidate.id == self.me.id {
            return;
        }
        let accept = match &self.predecessor {
            None => true,
            Some(p) => self.between(p.id, self.me.id, candidate.id),
        };
        if accept {
            self.predecessor = Some(candidate.clone());
        }
        if self.alone() {
            self.adopt_successor(candidate);
        }
    }

    fn fix_next_finger(&mut self, ctx: &mut dyn Context) {
        let i = self.next_finger;
        if self.lookups.values().any(|l| l.purpose == LookupFor::Finger(i)) {
            return;
        }
        let start = self.cfg.space.finger_start(self.me.id, i).expect("finger index in range");
        self.start_lookup(ctx, start, LookupFor::Finger(i), self.cfg.lookup_attempts);
    }

    fn check_predecessor(&mut self, ctx: &mut dyn Context) {
        let Some(p) = self.predecessor.clone() else {
            return;
        };
        if p.id == self.me.id || self.rpcs.values().any(|r| matches!(r, Rpc::PingPredecessor(_))) {
            return;
        }
        self.call(ctx, &p, Ping { target: Some(p.id) }, Rpc::PingPredecessor(p.clone()));
    }

    /// Pings one distinct finger per round so dead entries get purged.
    fn ping_next_finger(&mut self, ctx: &mut dyn Context) {
        let mut distinct: Vec<NodeRef> = Vec::new();
        for f in self.fingers.iter().flatten() {
            if f.id != self.me.id && f.id != self.successors[0].id && !distinct.iter().any(|d| d.id == f.id) {
                distinct.push(f.clone());
            }
        }
        if distinct.is_empty() {
            return;
        }
        let f = distinct[self.next_ping % distinct.len()].clone();
        self.next_ping = self.next_ping.wrapping_add(1);
        if self.rpcs.values().any(|r| matches!(r, Rpc::PingFinger(n) if n.id == f.id)) {
            return;
        }
        self.call(ctx, &f, Ping { target: Some(f.id) }, Rpc::PingFinger(f.clone()));
    }

    fn forget(&mut self, dead: Identifier) {
        for f in self.fingers.iter_mut() {
            if f.as_ref().is_some_and(|n| n.id == dead) {
                *f = None;
            }
        }
        if self.predecessor.as_ref().is_some_and(|p| p.id == dead) {
            self.predecessor = None;
        }
        let before = self.successors[0].id;
        self.successors.retain(|n| n.id != dead);
        if self.successors.is_empty() {
            let fallback = self.fingers.iter().flatten().next().cloned();
            match fallback {
                Some(f) => self.successors.push(f),
                None => {
                    self.successors.push(self.me.clone());
                    self.events.push(ChordEvent::Isolated);
                }
            }
        }
        if self.successors[0].id != before {
            self.events.push(ChordEvent::SuccessorChanged(self.successors[0].clone()));
        }
    }

    pub fn on_timer(&mut self, ctx: &mut dyn Context, kind: u64, seq: u64) {
        match kind {
            KIND_MAINT => self.maintain(ctx),
            KIND_RPC => {
                if let Some(rpc) = self.rpcs.remove(&seq) {
                    match rpc {
                        Rpc::Stabilize(n) | Rpc::PingFinger(n) => self.forget(n.id),
                        Rpc::PingPredecessor(n) => {
                            if self.predecessor.as_ref().is_some_and(|p| p.id == n.id) {
                                self.predecessor = None;
                            }
                        }
                    }
                }
            }
            KIND_LOOKUP => {
                if let Some(l) = self.lookups.remove(&seq) {
                    if l.attempts < self.cfg.lookup_attempts {
                        self.start_lookup(ctx, l.id, l.purpose, l.attempts + 1);
                    } else if let LookupFor::External(waiter) = l.purpose {
                        self.events.push(ChordEvent::LookupFailed { waiter });
                    }
                }
            }
            KIND_JOIN if !self.joined && seq == self.join_attempt as u64 => {
                // Below the limit the host re-issues the join.
                if self.join_attempt >= self.cfg.join_attempts {
                    self.join_attempt = u32::MAX;
                }
                self.events.push(ChordEvent::JoinFailed);
            }
            _ => {}
        }
    }

    pub fn join_exhausted(&self) -> bool {
        self.join_attempt >= self.cfg.join_attempts
    }

    /// Handles a message addressed to this vnode.
    pub fn handle(&mut self, ctx: &mut dyn Context, env_id: u64, from: &str, msg: Message) {
        match msg {
            Message::FindSuccessor(m) => self.on_find_successor(ctx, m),
            Message::FindSuccessorResp(m) => self.on_find_successor_resp(ctx, m),
            Message::GetPredecessor(_) => {
                let resp = GetPredecessorResp {
                    from: self.me.clone(),
                    predecessor: self.predecessor.clone(),
                    successors: self.successors.clone(),
                };
                ctx.send(from, Envelope::new(env_id, resp));
            }
            Message::GetPredecessorResp(m) => {
                if let Some(Rpc::Stabilize(s)) = self.rpcs.remove(&env_id) {
                    self.on_stabilize_reply(ctx, s, m);
                }
            }
            Message::Notify(m) => self.notify(m.candidate),
            Message::Ping(_) => {
                ctx.send(from, Envelope::new(env_id, Pong { from: Some(self.me.clone()), group: None }));
            }
            Message::Pong(_) => {
                self.rpcs.remove(&env_id);
            }
            _ => {}
        }
    }

    /// True when this vnode is waiting for the reply `env_id`.
    pub fn awaits(&self, env_id: u64) -> bool {
        self.rpcs.contains_key(&env_id)
    }

    fn on_find_successor(&mut self, ctx: &mut dyn Context, m: FindSuccessor) {
        if m.origin.id == self.me.id && !self.joined {
            return;
        }
        let answer = if self.alone() || self.between_right(self.me.id, self.successors[0].id, m.id) {
            Some(self.successors[0].clone())
        } else if m.id == self.me.id || self.owns(m.id) && self.predecessor.is_some() {
            Some(self.me.clone())
        } else {
            None
        };
        let answer = answer.or_else(|| {
            let next = self.closest_preceding(m.id);
            if next.id == self.me.id {
                Some(self.successors[0].clone())
            } else {
                let fwd = FindSuccessor { target: next.id, id: m.id, origin: m.origin.clone(), hops: m.hops + 1 };
                self.send(ctx, &next, fwd);
                None
            }
        });
        if let Some(successor) = answer {
            let resp = FindSuccessorResp { target: m.origin.id, id: m.id, successor, hops: m.hops };
            let id = ctx.next_id();
            ctx.send(&m.origin.address, Envelope::new(id, resp));
        }
    }

    fn on_find_successor_resp(&mut self, ctx: &mut dyn Context, m: FindSuccessorResp) {
        if !self.joined {
            if m.id != self.me.id {
                return;
            }
            if m.successor.id == self.me.id && m.successor.address != self.me.address {
                self.events.push(ChordEvent::IdCollision(m.successor));
                self.join_attempt = u32::MAX;
                return;
            }
            if m.successor.id != self.me.id {
                self.successors = vec![m.successor];
            }
            self.become_joined(ctx);
            return;
        }
        let done: Vec<u64> = self.lookups.iter().filter(|(_, l)| l.id == m.id).map(|(s, _)| *s).collect();
        for seq in done {
            let l = self.lookups.remove(&seq).unwrap();
            self.finish_lookup(l.purpose, m.successor.clone(), m.hops);
        }
    }
}

/// Forwards sends addressed to the host itself into a local queue.
struct Loopback<'a> {
    inner: &'a mut dyn Context,
    queue: &'a mut VecDeque<Envelope>,
}

impl Context for Loopback<'_> {
    fn now(&self) -> Tick {
        self.inner.now()
    }
    fn me(&self) -> &str {
        self.inner.me()
    }
    fn send(&mut self, to: &str, env: Envelope) {
        if to == self.inner.me() {
            self.queue.push_back(env);
        } else {
            self.inner.send(to, env);
        }
    }
    fn set_timer(&mut self, delay: Tick, token: u64) {
        self.inner.set_timer(delay, token);
    }
    fn rng(&mut self) -> &mut dyn RngCore {
        self.inner.rng()
    }
    fn next_id(&mut self) -> u64 {
        self.inner.next_id()
    }
    fn begin_cause(&mut self) -> u64 {
        self.inner.begin_cause()
    }
    fn observe(&mut self, obs: Observation) {
        self.inner.observe(obs);
    }
}

/// The vnodes of one physical gateway.
pub struct OverlayHost {
    physical: String,
    cfg: ChordConfig,
    vnodes: Vec<ChordNode>,
    bootstrap: Option<Endpoint>,
    loopback: VecDeque<Envelope>,
    events: Vec<(usize, ChordEvent)>,
}

impl OverlayHost {
    /// `bootstrap` is the address of any overlay member; `None` starts a
    /// new ring.
    pub fn new(physical: &str, address: &str, vnodes: usize, cfg: ChordConfig, bootstrap: Option<Endpoint>) -> Result<Self> {
        if vnodes == 0 {
            return Err(Error::InvalidArgument("vnode count must be positive".into()));
        }
        if vnodes > 0xfff {
            return Err(Error::InvalidArgument(format!("at most {} vnodes per host", 0xfff)));
        }
        let mut nodes = Vec::with_capacity(vnodes);
        for k in 0..vnodes {
            let r = vnode_ref(cfg.space, physical, k, address)?;
            if nodes.iter().any(|n: &ChordNode| n.id() == r.id) {
                return Err(Error::IdCollision(vnode_name(physical, k)));
            }
            nodes.push(ChordNode::new(r, k, cfg));
        }
        Ok(OverlayHost {
            physical: physical.to_string(),
            cfg,
            vnodes: nodes,
            bootstrap: bootstrap.filter(|b| b != address),
            loopback: VecDeque::new(),
            events: Vec::new(),
        })
    }

    pub fn physical(&self) -> &str {
        &self.physical
    }

    pub fn config(&self) -> &ChordConfig {
        &self.cfg
    }

    pub fn vnodes(&self) -> &[ChordNode] {
        &self.vnodes
    }

    pub fn vnode_refs(&self) -> Vec<NodeRef> {
        self.vnodes.iter().map(|v| v.me().clone()).collect()
    }

    pub fn is_joined(&self) -> bool {
        self.vnodes.iter().all(ChordNode::is_joined)
    }

    pub fn take_events(&mut self) -> Vec<(usize, ChordEvent)> {
        std::mem::take(&mut self.events)
    }

    pub fn is_timer(token: u64) -> bool {
        token & TAG_MASK == TAG
    }

    /// The own vnode responsible for `id`, if any.
    pub fn owner_of(&self, id: Identifier) -> Option<&NodeRef> {
        self.vnodes.iter().find(|v| v.owns(id)).map(|v| v.me())
    }

    /// Starts the ring or joins it. Vnode 0 goes first; the others join
    /// through it, spaced by `join_stagger`.
    pub fn start(&mut self, ctx: &mut dyn Context) {
        self.with_loop(ctx, |host, ctx| match host.bootstrap.clone() {
            None => host.vnodes[0].create(ctx),
            Some(b) => host.vnodes[0].join(ctx, &b, None),
        });
        for k in 1..self.vnodes.len() {
            ctx.set_timer(self.cfg.join_stagger * k as u64, token(k, KIND_JOIN, 0));
        }
    }

    /// Resolves the owner of `id`; answered through a `Located` or
    /// `LookupFailed` event carrying `waiter`.
    pub fn locate(&mut self, ctx: &mut dyn Context, id: Identifier, waiter: u64) {
        if let Some(owner) = self.owner_of(id).cloned() {
            self.events.push((0, ChordEvent::Located { waiter, owner, hops: 0 }));
            return;
        }
        // start from the vnode that precedes id most closely
        let space = self.cfg.space;
        let k = (0..self.vnodes.len())
            .filter(|&k| self.vnodes[k].is_joined())
            .min_by_key(|&k| space.distance(self.vnodes[k].id(), id))
            .unwrap_or(0);
        self.with_loop(ctx, |host, ctx| host.vnodes[k].locate(ctx, id, waiter));
    }

    fn with_loop(&mut self, ctx: &mut dyn Context, f: impl FnOnce(&mut Self, &mut dyn Context)) {
        let mut queue = std::mem::take(&mut self.loopback);
        {
            let mut lb = Loopback { inner: ctx, queue: &mut queue };
            f(self, &mut lb);
        }
        // deliver host-internal messages until none remain
        while let Some(env) = queue.pop_front() {
            let me = ctx.me().to_string();
            let mut lb = Loopback { inner: ctx, queue: &mut queue };
            self.dispatch(&mut lb, &me, env);
        }
        self.loopback = queue;
        self.collect();
    }

    fn collect(&mut self) {
        for (k, v) in self.vnodes.iter_mut().enumerate() {
            for e in v.take_events() {
                self.events.push((k, e));
            }
        }
    }

    fn target_vnode(&self, target: Identifier) -> usize {
        self.vnodes.iter().position(|v| v.id() == target).unwrap_or(0)
    }

    fn dispatch(&mut self, ctx: &mut dyn Context, from: &str, env: Envelope) -> bool {
        let k = match &env.message {
            Message::FindSuccessor(m) => self.target_vnode(m.target),
            Message::FindSuccessorResp(m) => self.target_vnode(m.target),
            Message::GetPredecessor(m) => self.target_vnode(m.target),
            Message::Notify(m) => self.target_vnode(m.target),
            Message::Ping(m) => match m.target {
                Some(t) => self.target_vnode(t),
                None => return false,
            },
            Message::GetPredecessorResp(_) | Message::Pong(_) => {
                match self.vnodes.iter().position(|v| v.awaits(env.id)) {
                    Some(k) => k,
                    None => return false,
                }
            }
            _ => return false,
        };
        self.vnodes[k].handle(ctx, env.id, from, env.message);
        true
    }

    /// Handles overlay traffic; returns false for messages it does not own.
    pub fn handle(&mut self, ctx: &mut dyn Context, from: &str, env: Envelope) -> bool {
        let mut handled = false;
        let from = from.to_string();
        self.with_loop(ctx, |host, ctx| handled = host.dispatch(ctx, &from, env));
        handled
    }

    pub fn on_timer(&mut self, ctx: &mut dyn Context, tok: u64) {
        let (k, kind, seq) = split_token(tok);
        if k >= self.vnodes.len() {
            return;
        }
        self.with_loop(ctx, |host, ctx| {
            if kind == KIND_JOIN && seq == 0 && !host.vnodes[k].is_joined() {
                // staggered join of a secondary vnode through vnode 0
                let via = host.vnodes[0].me().clone();
                let target = if host.vnodes[0].is_joined() { Some(via.id) } else { None };
                match (&host.bootstrap, target) {
                    (_, Some(t)) => host.vnodes[k].join(ctx, &via.address, Some(t)),
                    (Some(b), None) => host.vnodes[k].join(ctx, &b.clone(), None),
                    (None, None) => host.vnodes[k].create(ctx),
                }
                return;
            }
            host.vnodes[k].on_timer(ctx, kind, seq);
        });
        // retry joins that timed out
        let failed: Vec<usize> = self
            .events
            .iter()
            .filter(|(_, e)| *e == ChordEvent::JoinFailed)
            .map(|(k, _)| *k)
            .collect();
        for k in failed {
            if !self.vnodes[k].join_exhausted() {
                self.events.retain(|(j, e)| !(*j == k && *e == ChordEvent::JoinFailed));
                let boot = if k == 0 { self.bootstrap.clone() } else { Some(self.vnodes[0].me().address.clone()) };
                let target = (k != 0).then(|| self.vnodes[0].id());
                if let Some(b) = boot {
                    self.with_loop(ctx, |host, ctx| host.vnodes[k].join(ctx, &b, target));
                }
            }
        }
    }
}

/// A bare overlay member, for running overlays without storage groups.
pub struct OverlayPeer {
    pub host: OverlayHost,
    pub events: Vec<(Tick, usize, ChordEvent)>,
}

impl OverlayPeer {
    pub fn new(host: OverlayHost) -> Self {
        OverlayPeer { host, events: Vec::new() }
    }

    fn drain(&mut self, now: Tick) {
        for (k, e) in self.host.take_events() {
            self.events.push((now, k, e));
        }
    }

    pub fn locate(&mut self, ctx: &mut dyn Context, id: Identifier, waiter: u64) {
        self.host.locate(ctx, id, waiter);
        self.drain(ctx.now());
    }

    /// The answer for `waiter`, if one arrived.
    pub fn located(&self, waiter: u64) -> Option<(NodeRef, u32)> {
        self.events.iter().find_map(|(_, _, e)| match e {
            ChordEvent::Located { waiter: w, owner, hops } if *w == waiter => Some((owner.clone(), *hops)),
            _ => None,
        })
    }
}

impl Process for OverlayPeer {
    fn start(&mut self, ctx: &mut dyn Context) {
        self.host.start(ctx);
        self.drain(ctx.now());
    }

    fn on_message(&mut self, ctx: &mut dyn Context, from: &str, env: Envelope) {
        self.host.handle(ctx, from, env);
        self.drain(ctx.now());
    }

    fn on_timer(&mut self, ctx: &mut dyn Context, token: u64) {
        self.host.on_timer(ctx, token);
        self.drain(ctx.now());
    }

    crate::impl_any!();
}
