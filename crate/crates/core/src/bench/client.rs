//! The benchmark client: many logical sessions inside one node.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::workload::{key_name, next_op, value_for, KeyChooser, OpKind, WorkloadSpec};
use crate::error::Result;
use crate::transport::{Context, Process, Tick, TICKS_PER_MS};
use crate::wire::{ClientGet, ClientPut, Envelope, Message, RequestId, Scope, Status};

const LOAD_ATTEMPTS: u32 = 3;
const OPEN_LOOP_TIMER: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Idle,
    Loading,
    Loaded,
    Running,
    Done,
    Failed,
}

/// One completed run-phase operation.
#[derive(Clone, Debug, PartialEq)]
pub struct OpRecord {
    pub session: usize,
    pub kind: OpKind,
    pub scope: Scope,
    pub key: usize,
    pub sent_at: Tick,
    pub done_at: Tick,
    pub status: Status,
    /// Envelope id, for matching against a message trace.
    pub envelope: u64,
}

impl OpRecord {
    pub fn latency(&self) -> Tick {
        self.done_at - self.sent_at
    }
}

struct Session {
    rng: ChaCha8Rng,
    remaining: usize,
    load_cursor: usize,
}

struct Pending {
    session: usize,
    kind: OpKind,
    scope: Scope,
    key: usize,
    sent_at: Tick,
    load: Option<(RequestId, u32, Vec<u8>)>,
}

struct OpenLoop {
    start: Tick,
    interval: f64,
    count: usize,
    issued: usize,
}

pub struct BenchClient {
    index: usize,
    client_id: u64,
    target: String,
    spec: WorkloadSpec,
    chooser: KeyChooser,
    sessions: Vec<Session>,
    load_plan: Vec<(Scope, usize)>,
    phase: Phase,
    inflight: BTreeMap<u64, Pending>,
    next_seq: u64,
    records: Vec<OpRecord>,
    loaded: usize,
    load_error: Option<String>,
    run_started: Tick,
    open: Option<OpenLoop>,
}

impl BenchClient {
    /// `index` is the zero-based client number; it picks this client's share
    /// of the global keys and its RNG streams.
    pub fn new(index: usize, target: impl Into<String>, spec: WorkloadSpec) -> Result<Self> {
        spec.validate()?;
        let chooser = spec.chooser()?;
        let sessions = (0..spec.threads_per_client)
            .map(|s| Session { rng: spec.session_rng(index, s), remaining: spec.session_ops(s), load_cursor: s })
            .collect();
        let mut load_plan: Vec<(Scope, usize)> = (0..spec.record_count).map(|i| (Scope::Local, i)).collect();
        load_plan.extend((0..spec.record_count).filter(|i| i % spec.clients == index % spec.clients).map(|i| (Scope::Global, i)));
        Ok(BenchClient {
            index,
            client_id: index as u64 + 1,
            target: target.into(),
            spec,
            chooser,
            sessions,
            load_plan,
            phase: Phase::Idle,
            inflight: BTreeMap::new(),
            next_seq: 0,
            records: Vec::new(),
            loaded: 0,
            load_error: None,
            run_started: 0,
            open: None,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn records(&self) -> &[OpRecord] {
        &self.records
    }

    pub fn loaded(&self) -> usize {
        self.loaded
    }

    pub fn load_error(&self) -> Option<&str> {
        self.load_error.as_deref()
    }

    pub fn run_started(&self) -> Tick {
        self.run_started
    }

    /// Whether the current phase has nothing more to do.
    pub fn settled(&self) -> bool {
        matches!(self.phase, Phase::Idle | Phase::Loaded | Phase::Done | Phase::Failed)
    }

    fn request_id(&mut self) -> RequestId {
        self.next_seq += 1;
        RequestId { client: self.client_id, seq: self.next_seq }
    }

    fn send(&mut self, ctx: &mut dyn Context, msg: Message, pending: Pending) -> u64 {
        ctx.begin_cause();
        let id = ctx.next_id();
        ctx.send(&self.target, Envelope::new(id, msg));
        self.inflight.insert(id, pending);
        id
    }

    /// Writes every key of this client's share once per scope.
    pub fn start_load(&mut self, ctx: &mut dyn Context) {
        self.phase = Phase::Loading;
        for s in 0..self.sessions.len() {
            self.load_next(ctx, s);
        }
        self.check_load_done();
    }

    fn load_next(&mut self, ctx: &mut dyn Context, session: usize) {
        if self.load_error.is_some() {
            return;
        }
        let cursor = self.sessions[session].load_cursor;
        let Some(&(scope, key)) = self.load_plan.get(cursor) else {
            return;
        };
        self.sessions[session].load_cursor += self.spec.threads_per_client;
        let rid = self.request_id();
        let value = value_for(self.spec.value_size_bytes, key, 0);
        self.send_load(ctx, session, scope, key, rid, 1, value);
    }

    #[allow(clippy::too_many_arguments)]
    fn send_load(&mut self, ctx: &mut dyn Context, session: usize, scope: Scope, key: usize, rid: RequestId, attempt: u32, value: Vec<u8>) {
        let msg = ClientPut { scope, key: key_name(key), value: value.clone(), request_id: rid }.into();
        let pending = Pending { session, kind: OpKind::Update, scope, key, sent_at: ctx.now(), load: Some((rid, attempt, value)) };
        self.send(ctx, msg, pending);
    }

    fn check_load_done(&mut self) {
        if self.phase == Phase::Loading && self.inflight.is_empty() {
            self.phase = if self.load_error.is_some() { Phase::Failed } else { Phase::Loaded };
        }
    }

    /// Closed loop: every session keeps exactly one operation in flight.
    pub fn start_run(&mut self, ctx: &mut dyn Context) {
        self.phase = Phase::Running;
        self.run_started = ctx.now();
        for s in 0..self.sessions.len() {
            self.issue(ctx, s);
        }
        self.check_run_done();
    }

    /// Open loop: issue `rate` operations per second for `duration`,
    /// regardless of how many are outstanding.
    pub fn start_open_loop(&mut self, ctx: &mut dyn Context, rate: f64, duration: Tick) {
        self.phase = Phase::Running;
        self.run_started = ctx.now();
        let interval = 1000.0 * TICKS_PER_MS as f64 / rate;
        let count = (duration as f64 / interval).ceil() as usize;
        self.open = Some(OpenLoop { start: ctx.now(), interval, count, issued: 0 });
        self.open_tick(ctx);
    }

    fn open_tick(&mut self, ctx: &mut dyn Context) {
        let Some(open) = self.open.as_mut() else {
            return;
        };
        let now = ctx.now();
        let mut due = Vec::new();
        while open.issued < open.count && open.start + (open.issued as f64 * open.interval).round() as Tick <= now {
            due.push(open.issued % self.sessions.len());
            open.issued += 1;
        }
        let next = (open.issued < open.count).then(|| open.start + (open.issued as f64 * open.interval).round() as Tick);
        for s in due {
            self.issue_op(ctx, s);
        }
        if let Some(at) = next {
            ctx.set_timer(at - now, OPEN_LOOP_TIMER);
        }
        self.check_run_done();
    }

    fn issue(&mut self, ctx: &mut dyn Context, session: usize) {
        if self.sessions[session].remaining == 0 {
            return;
        }
        self.sessions[session].remaining -= 1;
        if !self.issue_op(ctx, session) {
            self.sessions[session].remaining = 0;
        }
    }

    fn issue_op(&mut self, ctx: &mut dyn Context, session: usize) -> bool {
        let Some(op) = next_op(&self.spec, &self.chooser, &mut self.sessions[session].rng) else {
            return false;
        };
        let key = key_name(op.key);
        let msg: Message = match op.kind {
            OpKind::Read => ClientGet { scope: op.scope, key, mode: self.spec.read_mode }.into(),
            OpKind::Update => {
                let rid = self.request_id();
                ClientPut { scope: op.scope, key, value: value_for(self.spec.value_size_bytes, op.key, rid.seq), request_id: rid }.into()
            }
        };
        let pending = Pending { session, kind: op.kind, scope: op.scope, key: op.key, sent_at: ctx.now(), load: None };
        self.send(ctx, msg, pending);
        true
    }

    fn check_run_done(&mut self) {
        if self.phase != Phase::Running || !self.inflight.is_empty() {
            return;
        }
        let done = match &self.open {
            Some(o) => o.issued == o.count,
            None => self.sessions.iter().all(|s| s.remaining == 0),
        };
        if done {
            self.phase = Phase::Done;
        }
    }
}

impl Process for BenchClient {
    fn on_message(&mut self, ctx: &mut dyn Context, _from: &str, env: Envelope) {
        let Message::ClientResponse(resp) = env.message else {
            return;
        };
        let Some(p) = self.inflight.remove(&env.id) else {
            return;
        };
        if let Some((rid, attempt, value)) = p.load {
            if resp.status == Status::Ok {
                self.loaded += 1;
                self.load_next(ctx, p.session);
            } else if resp.status.retryable() && attempt < LOAD_ATTEMPTS {
                self.send_load(ctx, p.session, p.scope, p.key, rid, attempt + 1, value);
            } else if self.load_error.is_none() {
                self.load_error = Some(format!("insert of {} key user{} failed: {:?}", scope_name(p.scope), p.key, resp.status));
            }
            self.check_load_done();
            return;
        }
        self.records.push(OpRecord {
            session: p.session,
            kind: p.kind,
            scope: p.scope,
            key: p.key,
            sent_at: p.sent_at,
            done_at: ctx.now(),
            status: resp.status,
            envelope: env.id,
        });
        if self.open.is_none() {
            self.issue(ctx, p.session);
        }
        self.check_run_done();
    }

    fn on_timer(&mut self, ctx: &mut dyn Context, token: u64) {
        if token == OPEN_LOOP_TIMER {
            self.open_tick(ctx);
        }
    }

    crate::impl_any!();
}

fn scope_name(s: Scope) -> &'static str {
    match s {
        Scope::Local => "local",
        Scope::Global => "global",
    }
}
