//! Edge server.
//!
//! Terminates client requests and routes them by scope: local operations go
//! through the group's Raft replica (forwarded to the leader when this node
//! is a follower), global operations go to the group's gateway. The node
//! also hosts learner replicas for groups it backs up; those are created on
//! the first AppendEntries that names them.

use std::collections::{BTreeMap, HashMap};

use crate::consensus::{Completion, Raft, RaftConfig, Replica, ReplicaResult};
use crate::error::{Error, Result};
use crate::storage::{DataRoot, ScopedKey, StorageEngine, StorageOptions, MAX_VALUE};
use crate::transport::{ms, Context, Process, Tick};
use crate::wire::{
    ClientResponse, Command, Endpoint, EntryPayload, Envelope, GlobalDelete, GlobalGet, GlobalPut, GroupInfo,
    GroupPropose, GroupRead, GroupResponse, Member, Message, Pong, Proposal, ReadMode, Scope, Status,
};

const KIND_SHIFT: u32 = 56;
const TIMER_DEADLINE: u64 = 1 << KIND_SHIFT;
const TIMER_RETRY: u64 = 2 << KIND_SHIFT;
const WAITER_MASK: u64 = (1 << KIND_SHIFT) - 1;
/// Redirects followed before giving up on a request.
const MAX_HOPS: u32 = 4;
/// Rounds without a known leader before answering `Unavailable`.
const MAX_LEADERLESS_RETRIES: u32 = 2;

#[derive(Clone)]
pub struct EdgeConfig {
    pub node_id: String,
    pub group: String,
    /// All voters of the group, this node included.
    pub peers: Vec<Member>,
    pub gateway: Option<Endpoint>,
    pub local_timeout: Tick,
    pub global_timeout: Tick,
    pub election_timeout: (Tick, Tick),
    pub heartbeat: Tick,
    pub storage: StorageOptions,
    pub data: DataRoot,
}

impl EdgeConfig {
    pub fn new(node_id: impl Into<String>, group: impl Into<String>, peers: Vec<Member>, gateway: Option<Endpoint>) -> Self {
        EdgeConfig {
            node_id: node_id.into(),
            group: group.into(),
            peers,
            gateway,
            local_timeout: ms(2000),
            global_timeout: ms(5000),
            election_timeout: (ms(150), ms(300)),
            heartbeat: ms(50),
            storage: StorageOptions::default(),
            data: DataRoot::Volatile,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.peers.is_empty() {
            return Err(Error::Config(format!("group {} has no members", self.group)));
        }
        if !self.peers.iter().any(|m| m.id == self.node_id) {
            return Err(Error::Config(format!("{} is not a member of group {}", self.node_id, self.group)));
        }
        let (lo, hi) = self.election_timeout;
        if lo == 0 || lo > hi || self.heartbeat == 0 || self.heartbeat >= lo {
            return Err(Error::Config("need 0 < heartbeat < election timeout min <= max".into()));
        }
        Ok(())
    }

    fn raft_config(&self, group: &str, voters: Vec<Member>) -> RaftConfig {
        let mut c = RaftConfig::new(group, self.node_id.clone(), voters);
        c.election_timeout = self.election_timeout;
        c.heartbeat = self.heartbeat;
        c
    }
}

#[derive(Clone, Debug)]
enum Origin {
    Client { to: Endpoint, id: u64, started: Tick },
    Peer { to: Endpoint, id: u64 },
}

#[derive(Clone, Debug)]
enum Op {
    Propose(EntryPayload),
    Read { scope: Scope, key: Vec<u8>, mode: ReadMode },
    Global,
}

struct Pending {
    origin: Origin,
    group: String,
    op: Op,
    hops: u32,
    leaderless: u32,
}

pub struct EdgeNode {
    cfg: EdgeConfig,
    replicas: BTreeMap<String, Replica>,
    slots: u64,
    pending: HashMap<u64, Pending>,
    /// Outgoing request id -> waiter.
    forwards: HashMap<u64, u64>,
    next_waiter: u64,
    gateway_heard: Tick,
}

impl EdgeNode {
    /// Builds the node, recovering its replica from `cfg.data`.
    pub fn new(cfg: EdgeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut node = EdgeNode {
            cfg,
            replicas: BTreeMap::new(),
            slots: 0,
            pending: HashMap::new(),
            forwards: HashMap::new(),
            next_waiter: 0,
            gateway_heard: 0,
        };
        let group = node.cfg.group.clone();
        node.open_replica(&group, node.cfg.peers.clone())?;
        Ok(node)
    }

    fn open_replica(&mut self, group: &str, voters: Vec<Member>) -> Result<()> {
        let (engine, store): (StorageEngine, _) = self.cfg.data.recover(group, self.cfg.storage)?;
        self.slots += 1;
        let raft = Raft::new(self.cfg.raft_config(group, voters), store, self.slots << 32)?;
        self.replicas.insert(group.to_string(), Replica::new(raft, engine));
        Ok(())
    }

    pub fn config(&self) -> &EdgeConfig {
        &self.cfg
    }

    pub fn id(&self) -> &str {
        &self.cfg.node_id
    }

    /// The replica of this node's own group.
    pub fn replica(&self) -> &Replica {
        &self.replicas[&self.cfg.group]
    }

    pub fn replica_of(&self, group: &str) -> Option<&Replica> {
        self.replicas.get(group)
    }

    pub fn hosted_groups(&self) -> impl Iterator<Item = &str> {
        self.replicas.keys().map(String::as_str)
    }

    pub fn is_leader(&self) -> bool {
        self.replica().raft.is_leader()
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    fn own(&mut self) -> &mut Replica {
        self.replicas.get_mut(&self.cfg.group).unwrap()
    }

    fn new_waiter(&mut self, p: Pending, ctx: &mut dyn Context) -> u64 {
        self.next_waiter += 1;
        let w = self.next_waiter;
        let timeout = match p.op {
            Op::Global => self.cfg.global_timeout,
            _ => self.cfg.local_timeout,
        };
        ctx.set_timer(timeout, TIMER_DEADLINE | w);
        self.pending.insert(w, p);
        w
    }

    fn respond(&mut self, ctx: &mut dyn Context, waiter: u64, status: Status, value: Option<Vec<u8>>, hint: Option<Endpoint>) {
        let Some(p) = self.pending.remove(&waiter) else {
            return;
        };
        match p.origin {
            Origin::Client { to, id, started } => {
                let retry = matches!(status, Status::Unavailable | Status::Timeout | Status::GatewayUnavailable);
                let resp = ClientResponse {
                    status,
                    value,
                    elapsed_us: (ctx.now() - started) * 10,
                    retry_after_ms: retry.then_some(self.cfg.election_timeout.1 / 100),
                    message: None,
                };
                ctx.send(&to, Envelope::new(id, resp));
            }
            Origin::Peer { to, id } => {
                ctx.send(&to, Envelope::new(id, GroupResponse { status, value, leader_hint: hint }));
            }
        }
    }

    fn on_client(&mut self, ctx: &mut dyn Context, to: Endpoint, id: u64, msg: Message) {
        let started = ctx.now();
        let origin = Origin::Client { to: to.clone(), id, started };
        let (scope, key, op) = match msg {
            Message::ClientGet(m) => (m.scope, m.key.clone(), Op::Read { scope: m.scope, key: m.key, mode: m.mode }),
            Message::ClientPut(m) => {
                if m.value.len() > MAX_VALUE {
                    return self.reject(ctx, &to, id, format!("value of {} bytes exceeds {MAX_VALUE}", m.value.len()));
                }
                let c = Command::put(m.scope, m.key.clone(), m.value, m.request_id);
                (m.scope, m.key, Op::Propose(EntryPayload::Command(c)))
            }
            Message::ClientDelete(m) => {
                let c = Command::delete(m.scope, m.key.clone(), m.request_id);
                (m.scope, m.key, Op::Propose(EntryPayload::Command(c)))
            }
            _ => return,
        };
        if let Err(e) = ScopedKey::new(scope, key.clone()) {
            return self.reject(ctx, &to, id, e.to_string());
        }
        match scope {
            Scope::Local => {
                let group = self.cfg.group.clone();
                let w = self.new_waiter(Pending { origin, group, op, hops: 0, leaderless: 0 }, ctx);
                self.dispatch_local(ctx, w);
            }
            Scope::Global => {
                let Some(gw) = self.cfg.gateway.clone() else {
                    let resp = ClientResponse {
                        status: Status::GatewayUnavailable,
                        value: None,
                        elapsed_us: 0,
                        retry_after_ms: None,
                        message: Some("no gateway configured".into()),
                    };
                    ctx.send(&to, Envelope::new(id, resp));
                    return;
                };
                let fwd: Message = match op {
                    Op::Read { key, mode, .. } => GlobalGet { key, mode, backup_of: None }.into(),
                    Op::Propose(EntryPayload::Command(c)) => match c.value {
                        Some(value) => GlobalPut { key: c.key, value, request_id: c.request_id }.into(),
                        None => GlobalDelete { key: c.key, request_id: c.request_id }.into(),
                    },
                    _ => unreachable!(),
                };
                let group = self.cfg.group.clone();
                let w = self.new_waiter(Pending { origin, group, op: Op::Global, hops: 0, leaderless: 0 }, ctx);
                let out = ctx.next_id();
                self.forwards.insert(out, w);
                ctx.send(&gw, Envelope::new(out, fwd));
            }
        }
    }

    fn reject(&mut self, ctx: &mut dyn Context, to: &str, id: u64, message: String) {
        let resp = ClientResponse { status: Status::InvalidArgument, value: None, elapsed_us: 0, retry_after_ms: None, message: Some(message) };
        ctx.send(to, Envelope::new(id, resp));
    }

    /// Placement of a local operation: propose here if leader, otherwise
    /// hand it to the leader.
    fn dispatch_local(&mut self, ctx: &mut dyn Context, w: u64) {
        let Some(p) = self.pending.get(&w) else {
            return;
        };
        let op = p.op.clone();
        let group = p.group.clone();
        let Some(rep) = self.replicas.get_mut(&group) else {
            return self.respond(ctx, w, Status::Unavailable, None, None);
        };
        match op {
            Op::Read { scope, key, mode: ReadMode::Serializable } => {
                rep.read(ctx, w, scope, key, ReadMode::Serializable);
            }
            _ if rep.raft.is_leader() => match op {
                Op::Propose(payload) => rep.propose(ctx, w, payload),
                Op::Read { scope, key, mode } => rep.read(ctx, w, scope, key, mode),
                Op::Global => {}
            },
            _ => {
                let hint = rep.raft.leader_hint();
                self.forward_or_wait(ctx, w, hint.map(|m| m.address));
                return;
            }
        }
        self.drain(ctx);
    }

    fn forward_or_wait(&mut self, ctx: &mut dyn Context, w: u64, leader: Option<Endpoint>) {
        let me = ctx.me().to_string();
        let leader = leader.filter(|a| *a != me);
        let Some(p) = self.pending.get_mut(&w) else {
            return;
        };
        match leader {
            Some(addr) if p.hops < MAX_HOPS && matches!(p.origin, Origin::Client { .. }) => {
                p.hops += 1;
                let msg: Message = match &p.op {
                    Op::Propose(EntryPayload::Command(c)) => {
                        GroupPropose { group: p.group.clone(), proposal: Proposal::Command(c.clone()) }.into()
                    }
                    Op::Propose(EntryPayload::SetLearners { members: m }) => {
                        GroupPropose { group: p.group.clone(), proposal: Proposal::SetLearners { members: m.clone() } }.into()
                    }
                    Op::Read { scope, key, mode } => {
                        GroupRead { group: p.group.clone(), scope: *scope, key: key.clone(), mode: *mode }.into()
                    }
                    Op::Propose(EntryPayload::Noop) | Op::Global => return,
                };
                let out = ctx.next_id();
                self.forwards.insert(out, w);
                ctx.send(&addr, Envelope::new(out, msg));
            }
            Some(addr) if matches!(p.origin, Origin::Peer { .. }) => {
                self.respond(ctx, w, Status::Redirect, None, Some(addr));
            }
            _ if p.leaderless < MAX_LEADERLESS_RETRIES && matches!(p.origin, Origin::Client { .. }) => {
                p.leaderless += 1;
                ctx.set_timer(self.cfg.election_timeout.1, TIMER_RETRY | w);
            }
            _ => self.respond(ctx, w, Status::Unavailable, None, None),
        }
    }

    fn on_group_request(&mut self, ctx: &mut dyn Context, to: Endpoint, id: u64, msg: Message) {
        let (group, op) = match msg {
            Message::GroupPropose(m) => {
                let payload = match m.proposal {
                    Proposal::Command(c) => {
                        if let Err(e) = c.validate() {
                            let r = GroupResponse { status: Status::InvalidArgument, value: None, leader_hint: None };
                            tracing::debug!(error = %e, "rejecting group proposal");
                            ctx.send(&to, Envelope::new(id, r));
                            return;
                        }
                        EntryPayload::Command(c)
                    }
                    Proposal::SetLearners { members: ms } => EntryPayload::SetLearners { members: ms },
                };
                (m.group, Op::Propose(payload))
            }
            Message::GroupRead(m) => (m.group, Op::Read { scope: m.scope, key: m.key, mode: m.mode }),
            _ => return,
        };
        if !self.replicas.contains_key(&group) {
            let r = GroupResponse { status: Status::Unavailable, value: None, leader_hint: None };
            ctx.send(&to, Envelope::new(id, r));
            return;
        }
        let w = self.new_waiter(Pending { origin: Origin::Peer { to, id }, group: group.clone(), op: op.clone(), hops: 0, leaderless: 0 }, ctx);
        if let Op::Propose(EntryPayload::SetLearners { members: ms }) = op {
            let rep = self.replicas.get_mut(&group).unwrap();
            if rep.raft.is_leader() && rep.raft.set_learners(ctx, ms).is_ok() {
                return self.respond(ctx, w, Status::Ok, None, None);
            }
        }
        self.dispatch_local(ctx, w);
    }

    fn on_forward_reply(&mut self, ctx: &mut dyn Context, id: u64, msg: Message) {
        let Some(w) = self.forwards.remove(&id) else {
            return;
        };
        match msg {
            Message::GroupResponse(r) => match r.status {
                Status::Redirect => self.forward_or_wait(ctx, w, r.leader_hint),
                Status::Unavailable => self.forward_or_wait(ctx, w, None),
                s => self.respond(ctx, w, s, r.value, None),
            },
            Message::GlobalResponse(r) => {
                self.gateway_heard = ctx.now();
                self.respond(ctx, w, r.status, r.value, None);
            }
            _ => {}
        }
    }

    /// Turns replica completions into responses.
    fn drain(&mut self, ctx: &mut dyn Context) {
        let mut done: Vec<Completion> = Vec::new();
        for rep in self.replicas.values_mut() {
            done.extend(rep.take_completions());
        }
        for c in done {
            match c.result {
                ReplicaResult::Done { status, value } => self.respond(ctx, c.waiter, status, value, None),
                ReplicaResult::NotLeader(hint) => self.forward_or_wait(ctx, c.waiter, hint.map(|m| m.address)),
            }
        }
    }

    fn on_raft(&mut self, ctx: &mut dyn Context, from: &str, msg: Message) {
        let group = match &msg {
            Message::RequestVote(m) => m.group.clone(),
            Message::RequestVoteResp(m) => m.group.clone(),
            Message::AppendEntries(m) => m.group.clone(),
            Message::AppendEntriesResp(m) => m.group.clone(),
            _ => return,
        };
        if !self.replicas.contains_key(&group) {
            if !matches!(msg, Message::AppendEntries(_)) {
                return;
            }
            // first contact from a group we back up
            if let Err(e) = self.open_replica(&group, Vec::new()) {
                tracing::warn!(%group, error = %e, "cannot open learner replica");
                return;
            }
            tracing::debug!(node = %self.cfg.node_id, %group, "hosting learner replica");
            self.replicas.get_mut(&group).unwrap().start(ctx);
        }
        self.replicas.get_mut(&group).unwrap().handle(ctx, from, msg);
        self.drain(ctx);
    }
}

impl Process for EdgeNode {
    fn start(&mut self, ctx: &mut dyn Context) {
        self.own().start(ctx);
    }

    fn on_message(&mut self, ctx: &mut dyn Context, from: &str, env: Envelope) {
        let to = env.reply_to.clone().unwrap_or_else(|| from.to_string());
        if self.cfg.gateway.as_deref() == Some(from) {
            self.gateway_heard = ctx.now();
        }
        match env.message {
            m @ (Message::ClientGet(_) | Message::ClientPut(_) | Message::ClientDelete(_)) => self.on_client(ctx, to, env.id, m),
            m @ (Message::GroupPropose(_) | Message::GroupRead(_)) => self.on_group_request(ctx, to, env.id, m),
            m @ (Message::GroupResponse(_) | Message::GlobalResponse(_)) => self.on_forward_reply(ctx, env.id, m),
            m @ (Message::RequestVote(_)
            | Message::RequestVoteResp(_)
            | Message::AppendEntries(_)
            | Message::AppendEntriesResp(_)) => self.on_raft(ctx, from, m),
            Message::Ping(_) => {
                let info = GroupInfo { group: self.cfg.group.clone(), members: self.cfg.peers.clone() };
                ctx.send(&to, Envelope::new(env.id, Pong { from: None, group: Some(info) }));
            }
            other => tracing::debug!(kind = ?other.kind(), "edge node ignores message"),
        }
    }

    fn on_timer(&mut self, ctx: &mut dyn Context, token: u64) {
        let w = token & WAITER_MASK;
        match token & !WAITER_MASK {
            TIMER_DEADLINE => {
                if let Some(p) = self.pending.get(&w) {
                    let status = if matches!(p.op, Op::Global) && ctx.now() >= self.gateway_heard + self.cfg.global_timeout {
                        Status::GatewayUnavailable
                    } else {
                        Status::Timeout
                    };
                    self.forwards.retain(|_, v| *v != w);
                    self.respond(ctx, w, status, None, None);
                }
            }
            TIMER_RETRY => self.dispatch_local(ctx, w),
            _ => {
                if let Some(rep) = self.replicas.values_mut().find(|r| r.raft.owns_timer(token)) {
                    rep.on_timer(ctx, token);
                }
                self.drain(ctx);
            }
        }
    }

    fn shutdown(&mut self) {
        for rep in self.replicas.values() {
            if let Err(e) = rep.storage.sync() {
                tracing::warn!(error = %e, "sync on shutdown failed");
            }
        }
    }

    crate::impl_any!();
}
