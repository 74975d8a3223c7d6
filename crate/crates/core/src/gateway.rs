//! Gateway: overlay member and resource finder for one edge group.
//!
//! A global operation arriving from an edge node is hashed onto the ring.
//! If one of the gateway's own vnodes owns the hash, the operation is sent
//! into the local group (GroupPropose / GroupRead to its leader); otherwise
//! it is forwarded to the owning gateway, found through the location cache
//! or an overlay lookup.
//!
//! Each gateway also picks a backup group, the group behind the successor
//! of its first vnode, and has that group's edge nodes added as learners of
//! its own group. When the own group stops answering, reads are served from
//! the backup's learner state and writes are refused.

use std::collections::{HashMap, VecDeque};
use std::num::NonZeroUsize;

use lru::LruCache;

use crate::chord::{ChordConfig, ChordEvent, OverlayHost};
use crate::error::Result;
use crate::ring::Identifier;
use crate::transport::{ms, Context, Observation, Process, Tick};
use crate::wire::{
    Command, Endpoint, Envelope, GlobalGet, GlobalResponse, GroupInfo, GroupPropose, GroupRead, Member, Message,
    NodeRef, Ping, Pong, Proposal, ReadMode, RequestId, Scope, Status,
};

const TAG: u64 = 0xA << 60;
const TAG_MASK: u64 = 0xF << 60;
const KIND_ATTEMPT: u64 = 1;
const KIND_RETRY: u64 = 2;
const KIND_BACKUP_CHECK: u64 = 3;
const KIND_PROBE: u64 = 4;
const KIND_DEADLINE: u64 = 5;
const SEQ_MASK: u64 = (1 << 48) - 1;
const PROBE_KEY: &[u8] = b"__gateway_probe";

fn token(kind: u64, seq: u64) -> u64 {
    TAG | (kind << 48) | (seq & SEQ_MASK)
}

#[derive(Clone)]
pub struct GatewayConfig {
    pub name: String,
    pub address: Endpoint,
    pub group: String,
    /// Edge nodes of the group; the first is the initial leader guess.
    pub members: Vec<Member>,
    /// Any overlay member; `None` starts a new overlay.
    pub bootstrap: Option<Endpoint>,
    pub vnodes: usize,
    /// Location cache entries; 0 disables caching.
    pub cache_capacity: usize,
    pub chord: ChordConfig,
    /// Wait per attempt at the own group.
    pub group_attempt_timeout: Tick,
    /// Budget for a request from start to answer.
    pub request_timeout: Tick,
    /// Wait for a forwarded request at another gateway.
    pub forward_timeout: Tick,
    /// Failures within `down_window` that mark the group down.
    pub down_threshold: usize,
    pub down_window: Tick,
    pub backup_check: Tick,
    pub backups: bool,
}

impl GatewayConfig {
    pub fn new(name: impl Into<String>, group: impl Into<String>, members: Vec<Member>, bootstrap: Option<Endpoint>) -> Self {
        let name = name.into();
        GatewayConfig {
            address: name.clone(),
            name,
            group: group.into(),
            members,
            bootstrap,
            vnodes: 1,
            cache_capacity: 1024,
            chord: ChordConfig::default(),
            group_attempt_timeout: ms(1000),
            request_timeout: ms(3000),
            forward_timeout: ms(4000),
            down_threshold: 3,
            down_window: ms(5000),
            backup_check: ms(2000),
            backups: true,
        }
    }
}

#[derive(Clone, Debug)]
enum GlobalOp {
    Put { key: Vec<u8>, value: Vec<u8>, request_id: RequestId },
    Get { key: Vec<u8>, mode: ReadMode },
    Delete { key: Vec<u8>, request_id: RequestId },
}

impl GlobalOp {
    fn key(&self) -> &[u8] {
        match self {
            GlobalOp::Put { key, .. } | GlobalOp::Get { key, .. } | GlobalOp::Delete { key, .. } => key,
        }
    }

    fn is_write(&self) -> bool {
        !matches!(self, GlobalOp::Get { .. })
    }

    fn to_message(&self) -> Message {
        match self.clone() {
            GlobalOp::Put { key, value, request_id } => crate::wire::GlobalPut { key, value, request_id }.into(),
            GlobalOp::Get { key, mode } => GlobalGet { key, mode, backup_of: None }.into(),
            GlobalOp::Delete { key, request_id } => crate::wire::GlobalDelete { key, request_id }.into(),
        }
    }

    fn group_message(&self, group: &str) -> Message {
        match self.clone() {
            GlobalOp::Put { key, value, request_id } => GroupPropose {
                group: group.to_string(),
                proposal: Proposal::Command(Command::put(Scope::Global, key, value, request_id)),
            }
            .into(),
            GlobalOp::Delete { key, request_id } => GroupPropose {
                group: group.to_string(),
                proposal: Proposal::Command(Command::delete(Scope::Global, key, request_id)),
            }
            .into(),
            GlobalOp::Get { key, mode } => GroupRead { group: group.to_string(), scope: Scope::Global, key, mode }.into(),
        }
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Locating,
    /// Waiting for another gateway.
    Remote(NodeRef),
    /// Talking to edge nodes of `group` (own group, or a group this
    /// gateway's members back up).
    Group { group: String },
    /// Waiting for the backup gateway.
    Backup,
}

struct Request {
    to: Endpoint,
    id: u64,
    op: GlobalOp,
    hash: Identifier,
    stage: Stage,
    lookup_hops: u32,
    relocations: u32,
    redirects: u32,
    /// Attempts at the own group that went unanswered.
    timeouts: u32,
    /// Attempt counter; stale attempt timers are ignored.
    attempt: u64,
    serve_backup_of: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Backup {
    pub group: String,
    pub gateway: Endpoint,
    pub members: Vec<Member>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GatewayStats {
    pub requests: u64,
    pub served_locally: u64,
    pub forwarded: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub not_owner: u64,
    pub lookup_failures: u64,
    pub backup_reads: u64,
    pub rejected_writes: u64,
}

pub struct Gateway {
    cfg: GatewayConfig,
    host: OverlayHost,
    cache: Option<LruCache<Identifier, NodeRef>>,
    leader: usize,
    requests: HashMap<u64, Request>,
    forwards: HashMap<u64, u64>,
    next_req: u64,
    failures: VecDeque<Tick>,
    down: bool,
    probe_out: Option<u64>,
    backup: Option<Backup>,
    backup_ping: Option<(u64, Endpoint)>,
    /// Outstanding learner-set proposal.
    learner_request: Option<u64>,
    learners_acked: bool,
    stats: GatewayStats,
}

impl Gateway {
    pub fn new(cfg: GatewayConfig) -> Result<Self> {
        if cfg.members.is_empty() {
            return Err(crate::Error::Config(format!("gateway {} has an empty group", cfg.name)));
        }
        let host = OverlayHost::new(&cfg.name, &cfg.address, cfg.vnodes, cfg.chord, cfg.bootstrap.clone())?;
        let cache = NonZeroUsize::new(cfg.cache_capacity).map(LruCache::new);
        Ok(Gateway {
            cfg,
            host,
            cache,
            leader: 0,
            requests: HashMap::new(),
            forwards: HashMap::new(),
            next_req: 0,
            failures: VecDeque::new(),
            down: false,
            probe_out: None,
            backup: None,
            backup_ping: None,
            learner_request: None,
            learners_acked: false,
            stats: GatewayStats::default(),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    pub fn overlay(&self) -> &OverlayHost {
        &self.host
    }

    pub fn stats(&self) -> &GatewayStats {
        &self.stats
    }

    pub fn backup(&self) -> Option<&Backup> {
        self.backup.as_ref()
    }

    pub fn group_down(&self) -> bool {
        self.down
    }

    pub fn cache_len(&self) -> usize {
        self.cache.as_ref().map_or(0, LruCache::len)
    }

    pub fn key_hash(&self, key: &[u8]) -> Identifier {
        self.cfg.chord.space.hash_id(key).expect("ring space is valid")
    }

    fn member_addr(&self) -> Endpoint {
        self.cfg.members[self.leader % self.cfg.members.len()].address.clone()
    }

    fn rotate_leader(&mut self) {
        self.leader = (self.leader + 1) % self.cfg.members.len();
    }

    fn note_failure(&mut self, ctx: &mut dyn Context) {
        let now = ctx.now();
        self.failures.push_back(now);
        while self.failures.front().is_some_and(|&t| t + self.cfg.down_window < now) {
            self.failures.pop_front();
        }
        if !self.down && self.failures.len() >= self.cfg.down_threshold {
            self.down = true;
            tracing::info!(gateway = %self.cfg.name, group = %self.cfg.group, "group marked down");
            ctx.observe(Observation::Note(format!("group {} down", self.cfg.group)));
            ctx.set_timer(self.cfg.group_attempt_timeout, token(KIND_PROBE, 0));
        }
    }

    fn note_success(&mut self, ctx: &mut dyn Context) {
        self.failures.clear();
        if self.down {
            self.down = false;
            tracing::info!(gateway = %self.cfg.name, group = %self.cfg.group, "group back up");
            ctx.observe(Observation::Note(format!("group {} up", self.cfg.group)));
        }
    }

    fn answer(&mut self, ctx: &mut dyn Context, rid: u64, mut resp: GlobalResponse) {
        let Some(r) = self.requests.remove(&rid) else {
            return;
        };
        resp.hops += r.lookup_hops;
        ctx.send(&r.to, Envelope::new(r.id, resp));
    }

    fn fail(&mut self, ctx: &mut dyn Context, rid: u64, status: Status) {
        let resp = GlobalResponse { status, value: None, served_by: None, from_backup: false, hops: 0 };
        self.answer(ctx, rid, resp);
    }

    fn on_global(&mut self, ctx: &mut dyn Context, from: &str, env: Envelope) {
        let forwarded = env.reply_to.is_some();
        let to = env.reply_to.clone().unwrap_or_else(|| from.to_string());
        let (op, backup_of) = match env.message {
            Message::GlobalPut(m) => (GlobalOp::Put { key: m.key, value: m.value, request_id: m.request_id }, None),
            Message::GlobalDelete(m) => (GlobalOp::Delete { key: m.key, request_id: m.request_id }, None),
            Message::GlobalGet(m) => (GlobalOp::Get { key: m.key, mode: m.mode }, m.backup_of),
            _ => return,
        };
        self.stats.requests += 1;
        let hash = self.key_hash(op.key());
        self.next_req += 1;
        let rid = self.next_req;
        self.requests.insert(
            rid,
            Request {
                to,
                id: env.id,
                op,
                hash,
                stage: Stage::Locating,
                lookup_hops: 0,
                relocations: 0,
                redirects: 0,
                timeouts: 0,
                attempt: 0,
                serve_backup_of: backup_of.clone(),
            },
        );
        ctx.set_timer(self.cfg.request_timeout, token(KIND_DEADLINE, rid));
        if let Some(group) = backup_of {
            // we are the backup: read the learner copy held by our members
            self.stats.backup_reads += 1;
            self.send_to_group(ctx, rid, group);
            return;
        }
        if self.host.owner_of(hash).is_some() {
            self.serve_owned(ctx, rid);
        } else if forwarded {
            self.stats.not_owner += 1;
            self.fail(ctx, rid, Status::NotOwner);
        } else {
            self.resolve(ctx, rid);
        }
    }

    fn resolve(&mut self, ctx: &mut dyn Context, rid: u64) {
        let hash = self.requests[&rid].hash;
        if let Some(owner) = self.cache.as_mut().and_then(|c| c.get(&hash).cloned()) {
            self.stats.cache_hits += 1;
            self.route_to(ctx, rid, owner);
            return;
        }
        self.stats.cache_misses += 1;
        self.host.locate(ctx, hash, rid);
        self.drain_overlay(ctx);
    }

    fn route_to(&mut self, ctx: &mut dyn Context, rid: u64, owner: NodeRef) {
        if owner.address == self.cfg.address {
            self.serve_owned(ctx, rid);
            return;
        }
        let Some(r) = self.requests.get_mut(&rid) else {
            return;
        };
        self.stats.forwarded += 1;
        r.stage = Stage::Remote(owner.clone());
        r.attempt += 1;
        let msg = r.op.to_message();
        let attempt = r.attempt;
        let out = ctx.next_id();
        self.forwards.insert(out, rid);
        ctx.send(&owner.address, Envelope::new(out, msg).with_reply_to(self.cfg.address.clone()));
        ctx.set_timer(self.cfg.forward_timeout, token(KIND_ATTEMPT, (rid << 8) | (attempt & 0xff)));
    }

    /// The key belongs to this gateway's group.
    fn serve_owned(&mut self, ctx: &mut dyn Context, rid: u64) {
        self.stats.served_locally += 1;
        let is_write = self.requests[&rid].op.is_write();
        if self.down {
            if is_write {
                self.stats.rejected_writes += 1;
                return self.fail(ctx, rid, Status::GroupUnavailable);
            }
            return self.read_from_backup(ctx, rid);
        }
        let group = self.cfg.group.clone();
        self.send_to_group(ctx, rid, group);
    }

    fn read_from_backup(&mut self, ctx: &mut dyn Context, rid: u64) {
        let Some(b) = self.backup.clone() else {
            return self.fail(ctx, rid, Status::GroupUnavailable);
        };
        let Some(r) = self.requests.get_mut(&rid) else {
            return;
        };
        r.stage = Stage::Backup;
        r.attempt += 1;
        let key = r.op.key().to_vec();
        let attempt = r.attempt;
        let msg = GlobalGet { key, mode: ReadMode::Serializable, backup_of: Some(self.cfg.group.clone()) };
        let out = ctx.next_id();
        self.forwards.insert(out, rid);
        ctx.send(&b.gateway, Envelope::new(out, msg).with_reply_to(self.cfg.address.clone()));
        ctx.set_timer(self.cfg.forward_timeout, token(KIND_ATTEMPT, (rid << 8) | (attempt & 0xff)));
    }

    fn send_to_group(&mut self, ctx: &mut dyn Context, rid: u64, group: String) {
        let addr = self.member_addr();
        let Some(r) = self.requests.get_mut(&rid) else {
            return;
        };
        let mut op = r.op.clone();
        if r.serve_backup_of.is_some() {
            op = GlobalOp::Get { key: op.key().to_vec(), mode: ReadMode::Serializable };
        }
        r.stage = Stage::Group { group: group.clone() };
        r.attempt += 1;
        let attempt = r.attempt;
        let out = ctx.next_id();
        self.forwards.insert(out, rid);
        ctx.send(&addr, Envelope::new(out, op.group_message(&group)));
        ctx.set_timer(self.cfg.group_attempt_timeout, token(KIND_ATTEMPT, (rid << 8) | (attempt & 0xff)));
    }

    fn on_reply(&mut self, ctx: &mut dyn Context, env: Envelope) {
        let Some(rid) = self.forwards.remove(&env.id) else {
            return;
        };
        let Some(r) = self.requests.get(&rid) else {
            return;
        };
        let stage = r.stage.clone();
        match (env.message, stage) {
            (Message::GroupResponse(g), Stage::Group { group }) => {
                let backup_serve = r.serve_backup_of.is_some();
                match g.status {
                    Status::Redirect => {
                        if let Some(hint) = g.leader_hint {
                            if let Some(i) = self.cfg.members.iter().position(|m| m.address == hint) {
                                self.leader = i;
                            }
                        }
                        let r = self.requests.get_mut(&rid).unwrap();
                        r.redirects += 1;
                        if r.redirects > self.cfg.members.len() as u32 + 2 {
                            return self.fail(ctx, rid, Status::GroupUnavailable);
                        }
                        self.send_to_group(ctx, rid, group);
                    }
                    Status::Unavailable | Status::Timeout => {
                        self.rotate_leader();
                        let r = self.requests.get_mut(&rid).unwrap();
                        r.redirects += 1;
                        if backup_serve && r.redirects >= self.cfg.members.len() as u32 {
                            return self.fail(ctx, rid, Status::GlobalUnavailable);
                        }
                        ctx.set_timer(ms(50), token(KIND_RETRY, rid));
                    }
                    status => {
                        if !backup_serve {
                            self.note_success(ctx);
                        }
                        let resp = GlobalResponse {
                            status,
                            value: g.value,
                            served_by: Some(self.cfg.group.clone()),
                            from_backup: backup_serve,
                            hops: 0,
                        };
                        self.answer(ctx, rid, resp);
                    }
                }
            }
            (Message::GlobalResponse(g), Stage::Remote(owner)) => {
                if g.status == Status::NotOwner {
                    if let Some(c) = self.cache.as_mut() {
                        c.pop(&r.hash);
                    }
                    let r = self.requests.get_mut(&rid).unwrap();
                    r.relocations += 1;
                    if r.relocations > 3 {
                        return self.fail(ctx, rid, Status::LookupFailed);
                    }
                    tracing::debug!(owner = %owner.address, "stale owner, relocating");
                    return self.resolve(ctx, rid);
                }
                let resp = GlobalResponse { hops: g.hops + 1, ..g };
                self.answer(ctx, rid, resp);
            }
            (Message::GlobalResponse(g), Stage::Backup) => {
                let resp = GlobalResponse { from_backup: true, ..g };
                self.answer(ctx, rid, resp);
            }
            _ => {}
        }
    }

    fn on_attempt_timeout(&mut self, ctx: &mut dyn Context, rid: u64, attempt: u64) {
        let Some(r) = self.requests.get(&rid) else {
            return;
        };
        if r.attempt & 0xff != attempt {
            return;
        }
        self.forwards.retain(|_, v| *v != rid);
        match r.stage.clone() {
            Stage::Group { group } => {
                let backup_serve = r.serve_backup_of.is_some();
                self.rotate_leader();
                if backup_serve {
                    return self.send_to_group(ctx, rid, group);
                }
                self.note_failure(ctx);
                let r = self.requests.get_mut(&rid).unwrap();
                r.timeouts += 1;
                // A read should not spend its whole budget waiting for the
                // group to be declared down.
                let give_up = r.timeouts >= 2 && self.backup.is_some();
                if (self.down || give_up) && !self.requests[&rid].op.is_write() {
                    self.read_from_backup(ctx, rid);
                } else {
                    self.send_to_group(ctx, rid, group);
                }
            }
            Stage::Remote(_) => {
                if let Some(c) = self.cache.as_mut() {
                    c.pop(&r.hash);
                }
                self.fail(ctx, rid, Status::GlobalUnavailable);
            }
            Stage::Backup => self.fail(ctx, rid, Status::GlobalUnavailable),
            Stage::Locating => {}
        }
    }

    fn on_deadline(&mut self, ctx: &mut dyn Context, rid: u64) {
        let Some(r) = self.requests.get(&rid) else {
            return;
        };
        let status = match r.stage {
            Stage::Group { .. } if r.op.is_write() && r.serve_backup_of.is_none() => Status::Timeout,
            Stage::Group { .. } => Status::GroupUnavailable,
            Stage::Locating => Status::LookupFailed,
            _ => Status::GlobalUnavailable,
        };
        self.forwards.retain(|_, v| *v != rid);
        self.fail(ctx, rid, status);
    }

    fn drain_overlay(&mut self, ctx: &mut dyn Context) {
        for (_, e) in self.host.take_events() {
            match e {
                ChordEvent::Located { waiter, owner, hops } => {
                    if let Some(r) = self.requests.get_mut(&waiter) {
                        r.lookup_hops += hops;
                        let hash = r.hash;
                        if let Some(c) = self.cache.as_mut() {
                            c.put(hash, owner.clone());
                        }
                        self.route_to(ctx, waiter, owner);
                    }
                }
                ChordEvent::LookupFailed { waiter } => {
                    self.stats.lookup_failures += 1;
                    self.fail(ctx, waiter, Status::LookupFailed);
                }
                ChordEvent::Joined => {}
                ChordEvent::IdCollision(other) => {
                    tracing::error!(gateway = %self.cfg.name, other = %other.address, "overlay id collision");
                    ctx.observe(Observation::Note(format!("id collision with {}", other.address)));
                }
                ChordEvent::JoinFailed => {
                    if self.host.vnodes().iter().any(|v| v.join_exhausted() && !v.is_joined()) {
                        tracing::error!(gateway = %self.cfg.name, "could not join overlay");
                        ctx.observe(Observation::Note("join failed".into()));
                    }
                }
                ChordEvent::SuccessorChanged(_) | ChordEvent::Isolated => {}
            }
        }
    }

    /// The gateway after this one on the ring, other than itself.
    fn backup_candidate(&self) -> Option<Endpoint> {
        let v0 = self.host.vnodes().first()?;
        if !v0.is_joined() {
            return None;
        }
        let me = v0.me().physical_id;
        v0.successor_list().iter().find(|n| n.physical_id != me).map(|n| n.address.clone())
    }

    fn check_backup(&mut self, ctx: &mut dyn Context) {
        ctx.set_timer(self.cfg.backup_check, token(KIND_BACKUP_CHECK, 0));
        if !self.cfg.backups {
            return;
        }
        let Some(candidate) = self.backup_candidate() else {
            return;
        };
        if self.backup.as_ref().is_some_and(|b| b.gateway == candidate) {
            self.ensure_learners(ctx);
            return;
        }
        let id = ctx.next_id();
        self.backup_ping = Some((id, candidate.clone()));
        ctx.send(&candidate, Envelope::new(id, Ping { target: None }));
    }

    /// Asks the own group's leader to make the backup members its learners,
    /// replacing any earlier backup, until the request is acknowledged.
    /// Unanswered requests are resent on the next backup check.
    fn ensure_learners(&mut self, ctx: &mut dyn Context) {
        let Some(b) = self.backup.clone() else {
            return;
        };
        if self.learners_acked {
            return;
        }
        let out = ctx.next_id();
        let msg = GroupPropose { group: self.cfg.group.clone(), proposal: Proposal::SetLearners { members: b.members } };
        self.learner_request = Some(out);
        let addr = self.member_addr();
        ctx.send(&addr, Envelope::new(out, msg));
    }

    fn on_pong(&mut self, ctx: &mut dyn Context, env_id: u64, pong: Pong) {
        if let Some((id, gw)) = self.backup_ping.clone() {
            if id == env_id {
                self.backup_ping = None;
                if let Some(GroupInfo { group, members }) = pong.group {
                    if group == self.cfg.group {
                        return;
                    }
                    tracing::info!(gateway = %self.cfg.name, own = %self.cfg.group, backup = %group, "backup group assigned");
                    ctx.observe(Observation::BackupAssigned { group: self.cfg.group.clone(), backup: group.clone() });
                    self.backup = Some(Backup { group, gateway: gw, members });
                    self.learner_request = None;
                    self.learners_acked = false;
                    self.ensure_learners(ctx);
                }
            }
        }
    }

    fn on_learner_reply(&mut self, env_id: u64, resp: &crate::wire::GroupResponse) -> bool {
        if self.learner_request != Some(env_id) {
            return false;
        }
        self.learner_request = None;
        match resp.status {
            Status::Ok => self.learners_acked = true,
            Status::Redirect => {
                if let Some(hint) = &resp.leader_hint {
                    if let Some(i) = self.cfg.members.iter().position(|x| &x.address == hint) {
                        self.leader = i;
                    }
                }
            }
            _ => self.rotate_leader(),
        }
        true
    }

    fn probe(&mut self, ctx: &mut dyn Context) {
        if !self.down {
            return;
        }
        ctx.set_timer(self.cfg.group_attempt_timeout, token(KIND_PROBE, 0));
        self.rotate_leader();
        let out = ctx.next_id();
        self.probe_out = Some(out);
        let msg = GroupRead { group: self.cfg.group.clone(), scope: Scope::Global, key: PROBE_KEY.to_vec(), mode: ReadMode::Linearizable };
        let addr = self.member_addr();
        ctx.send(&addr, Envelope::new(out, msg));
    }
}

impl Process for Gateway {
    fn start(&mut self, ctx: &mut dyn Context) {
        self.host.start(ctx);
        ctx.set_timer(self.cfg.backup_check, token(KIND_BACKUP_CHECK, 0));
        self.drain_overlay(ctx);
    }

    fn on_message(&mut self, ctx: &mut dyn Context, from: &str, env: Envelope) {
        match &env.message {
            Message::GlobalPut(_) | Message::GlobalGet(_) | Message::GlobalDelete(_) => self.on_global(ctx, from, env),
            Message::GlobalResponse(_) => self.on_reply(ctx, env),
            Message::GroupResponse(g) => {
                if self.probe_out == Some(env.id) {
                    self.probe_out = None;
                    if matches!(g.status, Status::Ok | Status::NotFound) {
                        self.note_success(ctx);
                    }
                } else if !self.on_learner_reply(env.id, g) {
                    self.on_reply(ctx, env);
                }
            }
            Message::Ping(p) if p.target.is_none() => {
                let info = GroupInfo { group: self.cfg.group.clone(), members: self.cfg.members.clone() };
                ctx.send(from, Envelope::new(env.id, Pong { from: None, group: Some(info) }));
            }
            _ => {
                let id = env.id;
                let pong = match &env.message {
                    Message::Pong(p) => Some(p.clone()),
                    _ => None,
                };
                if !self.host.handle(ctx, from, env) {
                    if let Some(p) = pong {
                        self.on_pong(ctx, id, p);
                    }
                }
                self.drain_overlay(ctx);
            }
        }
    }

    fn on_timer(&mut self, ctx: &mut dyn Context, tok: u64) {
        if OverlayHost::is_timer(tok) {
            self.host.on_timer(ctx, tok);
            self.drain_overlay(ctx);
            return;
        }
        if tok & TAG_MASK != TAG {
            return;
        }
        let kind = (tok >> 48) & 0xf;
        let seq = tok & SEQ_MASK;
        match kind {
            KIND_ATTEMPT => self.on_attempt_timeout(ctx, seq >> 8, seq & 0xff),
            KIND_RETRY => {
                if let Some(Stage::Group { group }) = self.requests.get(&seq).map(|r| r.stage.clone()) {
                    self.send_to_group(ctx, seq, group);
                }
            }
            KIND_BACKUP_CHECK => self.check_backup(ctx),
            KIND_PROBE => self.probe(ctx),
            KIND_DEADLINE => self.on_deadline(ctx, seq),
            _ => {}
        }
    }

    crate::impl_any!();
}
