//! Raft replication inside one edge group.
//!
//! [`Raft`] is the protocol core: elections, log replication, commit, the
//! read-index barrier for linearizable reads, and non-voting learners.
//! [`Replica`] pairs it with a [`StorageEngine`], applies committed entries
//! and resolves the requests waiting on them.
//!
//! Timers are namespaced by a per-instance `timer_base` so that one process
//! can host several replicas (its own group plus backup learners).

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;

use crate::storage::{ApplyOutcome, RaftStore, StorageEngine};
use crate::transport::{ms, Context, Observation, Tick};
use crate::wire::{
    AppendEntries, AppendEntriesResp, Envelope, EntryPayload, LogEntry, Member, Message, ReadMode,
    RequestVote, RequestVoteResp, Scope, Status,
};

const TIMER_ELECTION: u64 = 1 << 28;
const TIMER_HEARTBEAT: u64 = 2 << 28;
const TIMER_KIND_MASK: u64 = 0xf << 28;

#[derive(Clone, Debug)]
pub struct RaftConfig {
    pub group: String,
    pub me: String,
    pub voters: Vec<Member>,
    /// Learners known at bootstrap; more can be added through the log.
    pub learners: Vec<Member>,
    pub election_timeout: (Tick, Tick),
    pub heartbeat: Tick,
    /// Max entries per AppendEntries.
    pub max_batch: usize,
}

impl RaftConfig {
    pub fn new(group: impl Into<String>, me: impl Into<String>, voters: Vec<Member>) -> Self {
        RaftConfig {
            group: group.into(),
            me: me.into(),
            voters,
            learners: Vec::new(),
            election_timeout: (ms(150), ms(300)),
            heartbeat: ms(50),
            max_batch: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RaftRole {
    Follower,
    Candidate,
    Leader,
    Learner,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ProgressState {
    /// Unsure where the follower's log ends; one request at a time.
    Probe,
    /// Pipelining.
    Replicate,
}

#[derive(Clone, Debug)]
struct Progress {
    next: u64,
    matched: u64,
    state: ProgressState,
    last_contact: Tick,
}

struct ReadRound {
    seq: u64,
    read_id: u64,
    index: u64,
}

/// Something the owner of a [`Raft`] has to react to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RaftEvent {
    /// The barrier for `read_id` holds: serve once applied >= `index`.
    ReadReady { read_id: u64, index: u64 },
    ReadFailed { read_id: u64 },
    BecameLeader { term: u64 },
    SteppedDown { term: u64 },
}

/// Why a leader-only call was refused.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NotLeader {
    pub leader_hint: Option<Member>,
}

pub struct Raft {
    cfg: RaftConfig,
    store: RaftStore,
    timer_base: u64,
    role: RaftRole,
    term: u64,
    voted_for: Option<String>,
    log: Vec<LogEntry>,
    commit: u64,
    leader: Option<String>,
    learners: BTreeMap<String, Member>,
    /// Addresses learned from traffic for ids outside the configuration.
    known: BTreeMap<String, Member>,
    votes: BTreeSet<String>,
    progress: BTreeMap<String, Progress>,
    election_deadline: Tick,
    election_armed: bool,
    heartbeat_gen: u64,
    leader_since: Tick,
    read_seq: u64,
    read_rounds: VecDeque<ReadRound>,
    read_acks: BTreeMap<String, u64>,
    reads_awaiting_commit: Vec<u64>,
    events: Vec<RaftEvent>,
}

fn fatal<T>(r: crate::Result<T>) -> T {
    // Losing consensus state on disk is a crash-stop failure.
    r.unwrap_or_else(|e| panic!("raft persistence failed: {e}"))
}

impl Raft {
    pub fn new(cfg: RaftConfig, store: RaftStore, timer_base: u64) -> crate::Result<Self> {
        let hard = store.load()?;
        let is_voter = cfg.voters.iter().any(|m| m.id == cfg.me);
        let mut raft = Raft {
            role: if is_voter { RaftRole::Follower } else { RaftRole::Learner },
            term: hard.term,
            voted_for: hard.vote,
            log: hard.log,
            commit: 0,
            leader: None,
            learners: BTreeMap::new(),
            known: BTreeMap::new(),
            votes: BTreeSet::new(),
            progress: BTreeMap::new(),
            election_deadline: 0,
            election_armed: false,
            heartbeat_gen: 0,
            leader_since: 0,
            read_seq: 0,
            read_rounds: VecDeque::new(),
            read_acks: BTreeMap::new(),
            reads_awaiting_commit: Vec::new(),
            events: Vec::new(),
            cfg,
            store,
            timer_base,
        };
        raft.rebuild_learners();
        Ok(raft)
    }

    pub fn start(&mut self, ctx: &mut dyn Context) {
        if self.role != RaftRole::Learner {
            self.reset_election(ctx);
        }
    }

    pub fn group(&self) -> &str {
        &self.cfg.group
    }

    pub fn id(&self) -> &str {
        &self.cfg.me
    }

    pub fn role(&self) -> RaftRole {
        self.role
    }

    pub fn term(&self) -> u64 {
        self.term
    }

    pub fn commit_index(&self) -> u64 {
        self.commit
    }

    pub fn last_index(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn entry(&self, index: u64) -> Option<&LogEntry> {
        index.checked_sub(1).and_then(|i| self.log.get(i as usize))
    }

    pub fn is_leader(&self) -> bool {
        self.role == RaftRole::Leader
    }

    pub fn leader_id(&self) -> Option<&str> {
        self.leader.as_deref()
    }

    pub fn voters(&self) -> &[Member] {
        &self.cfg.voters
    }

    pub fn learners(&self) -> impl Iterator<Item = &Member> {
        self.learners.values()
    }

    /// Strict majority of voters. Learners never count.
    pub fn quorum(&self) -> usize {
        self.cfg.voters.len() / 2 + 1
    }

    pub fn member(&self, id: &str) -> Option<&Member> {
        self.cfg.voters.iter().find(|m| m.id == id).or_else(|| self.learners.get(id)).or_else(|| self.known.get(id))
    }

    pub fn note_address(&mut self, id: &str, address: &str) {
        if self.member(id).is_none() {
            self.known.insert(id.to_string(), Member::new(id, address));
        }
    }

    pub fn leader_hint(&self) -> Option<Member> {
        self.leader.as_deref().and_then(|l| self.member(l)).cloned()
    }

    /// Entries applied before a restart are known committed.
    pub fn set_commit_floor(&mut self, index: u64) {
        self.commit = self.commit.max(index.min(self.last_index()));
    }

    pub fn take_events(&mut self) -> Vec<RaftEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn owns_timer(&self, token: u64) -> bool {
        token & !0xffff_ffff == self.timer_base
    }

    fn term_at(&self, index: u64) -> u64 {
        if index == 0 {
            0
        } else {
            self.entry(index).map_or(0, |e| e.term)
        }
    }

    fn last_term(&self) -> u64 {
        self.term_at(self.last_index())
    }

    fn is_voter(&self, id: &str) -> bool {
        self.cfg.voters.iter().any(|m| m.id == id)
    }

    fn rebuild_learners(&mut self) {
        self.learners = self.cfg.learners.iter().map(|m| (m.id.clone(), m.clone())).collect();
        for e in &self.log {
            if let EntryPayload::SetLearners { members: ms } = &e.payload {
                self.learners = ms.iter().map(|m| (m.id.clone(), m.clone())).collect();
            }
        }
        let voters: Vec<String> = self.cfg.voters.iter().map(|m| m.id.clone()).collect();
        self.learners.retain(|id, _| !voters.contains(id));
    }

    fn persist_hard_state(&self) {
        fatal(self.store.save_hard_state(self.term, self.voted_for.as_deref()));
    }

    fn send(&self, ctx: &mut dyn Context, to: &str, msg: impl Into<Message>) {
        if let Some(m) = self.member(to) {
            let id = ctx.next_id();
            ctx.send(&m.address, Envelope::new(id, msg));
        }
    }

    fn random_timeout(&self, ctx: &mut dyn Context) -> Tick {
        let (lo, hi) = self.cfg.election_timeout;
        ctx.rng().random_range(lo..=hi)
    }

    fn reset_election(&mut self, ctx: &mut dyn Context) {
        self.election_deadline = ctx.now() + self.random_timeout(ctx);
        if !self.election_armed {
            self.election_armed = true;
            ctx.set_timer(self.election_deadline - ctx.now(), self.timer_base | TIMER_ELECTION);
        }
    }

    pub fn on_timer(&mut self, ctx: &mut dyn Context, token: u64) {
        match token & TIMER_KIND_MASK {
            TIMER_ELECTION => {
                self.election_armed = false;
                if matches!(self.role, RaftRole::Leader | RaftRole::Learner) {
                    return;
                }
                if ctx.now() < self.election_deadline {
                    self.election_armed = true;
                    ctx.set_timer(self.election_deadline - ctx.now(), self.timer_base | TIMER_ELECTION);
                } else {
                    self.start_election(ctx);
                }
            }
            TIMER_HEARTBEAT => {
                if self.role != RaftRole::Leader || token & 0x0fff_ffff != self.heartbeat_gen & 0x0fff_ffff {
                    return;
                }
                if !self.check_quorum(ctx) {
                    return;
                }
                self.broadcast(ctx, None, true);
                ctx.set_timer(self.cfg.heartbeat, self.timer_base | TIMER_HEARTBEAT | (self.heartbeat_gen & 0x0fff_ffff));
            }
            _ => {}
        }
    }

    /// Leader steps down if a majority has been silent for a full election timeout.
    fn check_quorum(&mut self, ctx: &mut dyn Context) -> bool {
        let window = self.cfg.election_timeout.1;
        let now = ctx.now();
        if now < self.leader_since + window {
            return true;
        }
        let alive = 1 + self
            .progress
            .iter()
            .filter(|(id, p)| self.is_voter(id) && p.last_contact + window >= now)
            .count();
        if alive >= self.quorum() {
            return true;
        }
        tracing::debug!(group = %self.cfg.group, me = %self.cfg.me, term = self.term, "lost quorum contact, stepping down");
        self.become_follower(ctx, self.term, None);
        false
    }

    pub fn start_election(&mut self, ctx: &mut dyn Context) {
        if !matches!(self.role, RaftRole::Follower | RaftRole::Candidate) {
            return;
        }
        self.role = RaftRole::Candidate;
        self.term += 1;
        self.voted_for = Some(self.cfg.me.clone());
        self.leader = None;
        self.persist_hard_state();
        self.votes = BTreeSet::from([self.cfg.me.clone()]);
        self.reset_election(ctx);
        let req = RequestVote {
            group: self.cfg.group.clone(),
            term: self.term,
            candidate: self.cfg.me.clone(),
            last_log_index: self.last_index(),
            last_log_term: self.last_term(),
        };
        let peers: Vec<String> = self.cfg.voters.iter().filter(|m| m.id != self.cfg.me).map(|m| m.id.clone()).collect();
        for p in peers {
            self.send(ctx, &p, req.clone());
        }
        if self.votes.len() >= self.quorum() {
            self.become_leader(ctx);
        }
    }

    fn become_follower(&mut self, ctx: &mut dyn Context, term: u64, leader: Option<String>) {
        let was_leader = self.role == RaftRole::Leader;
        if term > self.term {
            self.term = term;
            self.voted_for = None;
            self.persist_hard_state();
        }
        if self.role != RaftRole::Learner {
            self.role = RaftRole::Follower;
        }
        self.leader = leader;
        if was_leader {
            self.heartbeat_gen += 1;
            self.progress.clear();
            for r in self.read_rounds.drain(..) {
                self.events.push(RaftEvent::ReadFailed { read_id: r.read_id });
            }
            for read_id in self.reads_awaiting_commit.drain(..) {
                self.events.push(RaftEvent::ReadFailed { read_id });
            }
            self.events.push(RaftEvent::SteppedDown { term: self.term });
            ctx.observe(Observation::SteppedDown { group: self.cfg.group.clone(), term: self.term });
        }
        if self.role == RaftRole::Follower {
            self.reset_election(ctx);
        }
    }

    fn become_leader(&mut self, ctx: &mut dyn Context) {
        self.role = RaftRole::Leader;
        self.leader = Some(self.cfg.me.clone());
        self.leader_since = ctx.now();
        self.read_acks.clear();
        let next = self.last_index() + 1;
        let now = ctx.now();
        self.progress = self
            .cfg
            .voters
            .iter()
            .chain(self.learners.values())
            .filter(|m| m.id != self.cfg.me)
            .map(|m| (m.id.clone(), Progress { next, matched: 0, state: ProgressState::Probe, last_contact: now }))
            .collect();
        self.events.push(RaftEvent::BecameLeader { term: self.term });
        ctx.observe(Observation::BecameLeader { group: self.cfg.group.clone(), term: self.term });
        tracing::debug!(group = %self.cfg.group, me = %self.cfg.me, term = self.term, "became leader");
        self.append_local(EntryPayload::Noop);
        self.broadcast(ctx, None, true);
        self.heartbeat_gen += 1;
        ctx.set_timer(self.cfg.heartbeat, self.timer_base | TIMER_HEARTBEAT | (self.heartbeat_gen & 0x0fff_ffff));
        self.maybe_commit(ctx);
    }

    fn append_local(&mut self, payload: EntryPayload) -> (u64, u64) {
        let entry = LogEntry { term: self.term, index: self.last_index() + 1, payload };
        fatal(self.store.append(std::slice::from_ref(&entry)));
        if let EntryPayload::SetLearners { members: ms } = &entry.payload {
            self.replace_learners(ms, entry.index);
        }
        self.log.push(entry);
        (self.last_index(), self.term)
    }

    fn replace_learners(&mut self, members: &[Member], at_index: u64) {
        let old: Vec<String> = self.learners.keys().cloned().collect();
        self.learners = members
            .iter()
            .filter(|m| !self.is_voter(&m.id) && m.id != self.cfg.me)
            .map(|m| (m.id.clone(), m.clone()))
            .collect();
        if self.role != RaftRole::Leader {
            return;
        }
        for id in old.iter().filter(|id| !self.learners.contains_key(*id)) {
            self.progress.remove(id);
        }
        for id in self.learners.keys() {
            self.progress
                .entry(id.clone())
                .or_insert(Progress { next: at_index, matched: 0, state: ProgressState::Probe, last_contact: 0 });
        }
    }

    /// Appends a client payload. Only the leader accepts.
    pub fn propose(&mut self, ctx: &mut dyn Context, payload: EntryPayload) -> Result<(u64, u64), NotLeader> {
        if self.role != RaftRole::Leader {
            return Err(NotLeader { leader_hint: self.leader_hint() });
        }
        let receipt = self.append_local(payload);
        self.broadcast(ctx, None, false);
        self.maybe_commit(ctx);
        Ok(receipt)
    }

    /// Makes `members` the non-voting members, dropping any others.
    /// Idempotent: returns `None` when the set is already in place.
    pub fn set_learners(&mut self, ctx: &mut dyn Context, members: Vec<Member>) -> Result<Option<(u64, u64)>, NotLeader> {
        if self.role != RaftRole::Leader {
            return Err(NotLeader { leader_hint: self.leader_hint() });
        }
        let want: BTreeSet<&str> = members.iter().filter(|m| !self.is_voter(&m.id)).map(|m| m.id.as_str()).collect();
        if want == self.learners.keys().map(String::as_str).collect() {
            return Ok(None);
        }
        self.propose(ctx, EntryPayload::SetLearners { members }).map(Some)
    }

    /// Starts a read barrier; the answer arrives as a [`RaftEvent`].
    pub fn read_index(&mut self, ctx: &mut dyn Context, read_id: u64) -> Result<(), NotLeader> {
        if self.role != RaftRole::Leader {
            return Err(NotLeader { leader_hint: self.leader_hint() });
        }
        if self.term_at(self.commit) != self.term {
            // the new leader's no-op has not committed yet
            self.reads_awaiting_commit.push(read_id);
            return Ok(());
        }
        self.start_read_round(ctx, read_id);
        Ok(())
    }

    fn start_read_round(&mut self, ctx: &mut dyn Context, read_id: u64) {
        if self.quorum() == 1 {
            self.events.push(RaftEvent::ReadReady { read_id, index: self.commit });
            return;
        }
        self.read_seq += 1;
        self.read_rounds.push_back(ReadRound { seq: self.read_seq, read_id, index: self.commit });
        let seq = self.read_seq;
        let voters: Vec<String> = self.cfg.voters.iter().filter(|m| m.id != self.cfg.me).map(|m| m.id.clone()).collect();
        for v in voters {
            self.send_append(ctx, &v, Some(seq), true);
        }
    }

    fn confirm_reads(&mut self) {
        while let Some(front) = self.read_rounds.front() {
            let acks = 1 + self.read_acks.iter().filter(|(id, s)| **s >= front.seq && self.is_voter(id)).count();
            if acks < self.quorum() {
                break;
            }
            let r = self.read_rounds.pop_front().unwrap();
            self.events.push(RaftEvent::ReadReady { read_id: r.read_id, index: r.index });
        }
    }

    fn broadcast(&mut self, ctx: &mut dyn Context, read_ctx: Option<u64>, heartbeat: bool) {
        let peers: Vec<String> = self.progress.keys().cloned().collect();
        for p in peers {
            self.send_append(ctx, &p, read_ctx, heartbeat);
        }
    }

    /// Sends AppendEntries to one peer. Outside heartbeats, a peer in probe
    /// state only gets traffic in response to its own replies.
    fn send_append(&mut self, ctx: &mut dyn Context, peer: &str, read_ctx: Option<u64>, force: bool) {
        let last = self.last_index();
        let Some(pr) = self.progress.get(peer) else {
            return;
        };
        let (next, state) = (pr.next, pr.state);
        let has_new = next <= last;
        if !force && (!has_new || state == ProgressState::Probe) {
            return;
        }
        let prev = next - 1;
        let upto = last.min(prev + self.cfg.max_batch as u64);
        let learner = self.learners.contains_key(peer);
        let window = &self.log[prev as usize..upto as usize];
        // Local data never leaves the group; learners see those entries as
        // no-ops and get them with the next heartbeat.
        if learner && !force && window.iter().all(|e| redact(e).payload == EntryPayload::Noop) {
            return;
        }
        let entries: Vec<LogEntry> = if learner { window.iter().map(redact).collect() } else { window.to_vec() };
        if state == ProgressState::Replicate {
            self.progress.get_mut(peer).unwrap().next = upto + 1;
        }
        let msg = AppendEntries {
            group: self.cfg.group.clone(),
            term: self.term,
            leader: self.cfg.me.clone(),
            prev_log_index: prev,
            prev_log_term: self.term_at(prev),
            entries,
            leader_commit: self.commit,
            read_ctx,
        };
        self.send(ctx, peer, msg);
    }

    fn maybe_commit(&mut self, ctx: &mut dyn Context) {
        if self.role != RaftRole::Leader {
            return;
        }
        let mut matched: Vec<u64> = self
            .cfg
            .voters
            .iter()
            .map(|m| if m.id == self.cfg.me { self.last_index() } else { self.progress.get(&m.id).map_or(0, |p| p.matched) })
            .collect();
        matched.sort_unstable_by(|a, b| b.cmp(a));
        let candidate = matched[self.quorum() - 1];
        if candidate > self.commit && self.term_at(candidate) == self.term {
            self.commit = candidate;
            for read_id in std::mem::take(&mut self.reads_awaiting_commit) {
                self.start_read_round(ctx, read_id);
            }
        }
    }

    pub fn handle(&mut self, ctx: &mut dyn Context, msg: Message) {
        match msg {
            Message::RequestVote(m) => self.on_request_vote(ctx, m),
            Message::RequestVoteResp(m) => self.on_vote_resp(ctx, m),
            Message::AppendEntries(m) => self.on_append(ctx, m),
            Message::AppendEntriesResp(m) => self.on_append_resp(ctx, m),
            _ => {}
        }
    }

    fn on_request_vote(&mut self, ctx: &mut dyn Context, m: RequestVote) {
        if m.term > self.term {
            self.become_follower(ctx, m.term, None);
        }
        let up_to_date = (m.last_log_term, m.last_log_index) >= (self.last_term(), self.last_index());
        let granted = self.role != RaftRole::Learner
            && m.term == self.term
            && self.is_voter(&m.candidate)
            && self.voted_for.as_ref().is_none_or(|v| *v == m.candidate)
            && up_to_date;
        if granted {
            self.voted_for = Some(m.candidate.clone());
            self.persist_hard_state();
            self.reset_election(ctx);
        }
        let resp = RequestVoteResp { group: self.cfg.group.clone(), term: self.term, voter: self.cfg.me.clone(), granted };
        self.send(ctx, &m.candidate, resp);
    }

    fn on_vote_resp(&mut self, ctx: &mut dyn Context, m: RequestVoteResp) {
        if m.term > self.term {
            self.become_follower(ctx, m.term, None);
            return;
        }
        if self.role != RaftRole::Candidate || m.term != self.term || !m.granted || !self.is_voter(&m.voter) {
            return;
        }
        self.votes.insert(m.voter);
        if self.votes.len() >= self.quorum() {
            self.become_leader(ctx);
        }
    }

    fn on_append(&mut self, ctx: &mut dyn Context, m: AppendEntries) {
        let reply = |raft: &Raft, ctx: &mut dyn Context, success: bool, match_index: u64| {
            let resp = AppendEntriesResp {
                group: raft.cfg.group.clone(),
                term: raft.term,
                from: raft.cfg.me.clone(),
                success,
                match_index,
                last_log_index: raft.last_index(),
                read_ctx: m.read_ctx,
            };
            // the leader may be a learner-unknown address; answer via membership
            raft.send(ctx, &m.leader, resp);
        };
        if m.term < self.term {
            reply(self, ctx, false, m.prev_log_index);
            return;
        }
        if m.term > self.term || self.role == RaftRole::Candidate || self.leader.as_deref() != Some(&m.leader) {
            self.become_follower(ctx, m.term, Some(m.leader.clone()));
        } else if self.role != RaftRole::Learner {
            self.reset_election(ctx);
        }
        if m.prev_log_index > self.last_index() || self.term_at(m.prev_log_index) != m.prev_log_term {
            // on failure match_index echoes the rejected prevLogIndex
            reply(self, ctx, false, m.prev_log_index);
            return;
        }
        let mut append_from = None;
        for (k, e) in m.entries.iter().enumerate() {
            match self.entry(e.index) {
                Some(existing) if existing.term == e.term => continue,
                Some(_) => {
                    assert!(e.index > self.commit, "conflict below commit index");
                    fatal(self.store.truncate_from(e.index));
                    self.log.truncate(e.index as usize - 1);
                    self.rebuild_learners();
                    append_from = Some(k);
                    break;
                }
                None => {
                    append_from = Some(k);
                    break;
                }
            }
        }
        if let Some(k) = append_from {
            let new = &m.entries[k..];
            fatal(self.store.append(new));
            for e in new {
                if let EntryPayload::SetLearners { members: ms } = &e.payload {
                    self.replace_learners(ms, e.index);
                }
            }
            self.log.extend_from_slice(new);
        }
        let last_new = m.prev_log_index + m.entries.len() as u64;
        if m.leader_commit > self.commit {
            self.commit = m.leader_commit.min(last_new).max(self.commit);
        }
        reply(self, ctx, true, last_new);
    }

    fn on_append_resp(&mut self, ctx: &mut dyn Context, m: AppendEntriesResp) {
        if m.term > self.term {
            self.become_follower(ctx, m.term, None);
            return;
        }
        if self.role != RaftRole::Leader || m.term != self.term {
            return;
        }
        let now = ctx.now();
        let last = self.last_index();
        let Some(pr) = self.progress.get_mut(&m.from) else {
            return;
        };
        pr.last_contact = now;
        let mut stale = false;
        if m.success {
            pr.matched = pr.matched.max(m.match_index);
            pr.next = pr.next.max(pr.matched + 1);
            pr.state = ProgressState::Replicate;
        } else {
            let rejected = m.match_index;
            stale = match pr.state {
                ProgressState::Replicate => rejected < pr.matched,
                ProgressState::Probe => rejected + 1 != pr.next,
            };
            if !stale {
                pr.next = rejected.min(m.last_log_index + 1).max(pr.matched + 1).max(1);
                pr.state = ProgressState::Probe;
            }
        }
        let next = pr.next;
        if let Some(seq) = m.read_ctx {
            let ack = self.read_acks.entry(m.from.clone()).or_insert(0);
            *ack = (*ack).max(seq);
            self.confirm_reads();
        }
        if m.success {
            self.maybe_commit(ctx);
        }
        if !stale && (next <= last || !m.success) {
            self.send_append(ctx, &m.from, None, true);
        }
    }
}

/// Outcome of a request handed to a [`Replica`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReplicaResult {
    Done { status: Status, value: Option<Vec<u8>> },
    NotLeader(Option<Member>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub waiter: u64,
    pub result: ReplicaResult,
}

struct PendingRead {
    waiter: u64,
    scope: Scope,
    key: Vec<u8>,
}

/// A Raft instance and the state machine it drives.
pub struct Replica {
    pub raft: Raft,
    pub storage: StorageEngine,
    proposals: BTreeMap<u64, Vec<(u64, u64)>>,
    reads: BTreeMap<u64, PendingRead>,
    ready_reads: BTreeMap<u64, Vec<PendingRead>>,
    next_read: u64,
    completions: Vec<Completion>,
}

impl Replica {
    pub fn new(raft: Raft, storage: StorageEngine) -> Self {
        let mut raft = raft;
        raft.set_commit_floor(storage.applied_index());
        Replica {
            raft,
            storage,
            proposals: BTreeMap::new(),
            reads: BTreeMap::new(),
            ready_reads: BTreeMap::new(),
            next_read: 0,
            completions: Vec::new(),
        }
    }

    pub fn start(&mut self, ctx: &mut dyn Context) {
        self.raft.start(ctx);
        self.apply_committed();
    }

    pub fn group(&self) -> &str {
        self.raft.group()
    }

    /// Proposes a payload; `waiter` completes once it is applied.
    pub fn propose(&mut self, ctx: &mut dyn Context, waiter: u64, payload: EntryPayload) {
        match self.raft.propose(ctx, payload) {
            Ok((index, term)) => self.proposals.entry(index).or_default().push((waiter, term)),
            Err(nl) => self.completions.push(Completion { waiter, result: ReplicaResult::NotLeader(nl.leader_hint) }),
        }
        self.pump(ctx);
    }

    pub fn set_learners(&mut self, ctx: &mut dyn Context, members: Vec<Member>) {
        if let Err(e) = self.raft.set_learners(ctx, members) {
            tracing::debug!(group = %self.raft.group(), ?e, "set_learners refused");
        }
        self.pump(ctx);
    }

    /// Reads a key. Linearizable reads go through the read-index barrier at
    /// the leader; serializable reads are answered from local state.
    pub fn read(&mut self, ctx: &mut dyn Context, waiter: u64, scope: Scope, key: Vec<u8>, mode: ReadMode) {
        if mode == ReadMode::Serializable {
            let result = self.lookup(scope, &key);
            self.completions.push(Completion { waiter, result });
            return;
        }
        self.next_read += 1;
        let read_id = self.next_read;
        match self.raft.read_index(ctx, read_id) {
            Ok(()) => {
                self.reads.insert(read_id, PendingRead { waiter, scope, key });
            }
            Err(nl) => self.completions.push(Completion { waiter, result: ReplicaResult::NotLeader(nl.leader_hint) }),
        }
        self.pump(ctx);
    }

    pub fn handle(&mut self, ctx: &mut dyn Context, from: &str, msg: Message) {
        let sender = match &msg {
            Message::AppendEntries(m) => Some(&m.leader),
            Message::AppendEntriesResp(m) => Some(&m.from),
            Message::RequestVote(m) => Some(&m.candidate),
            Message::RequestVoteResp(m) => Some(&m.voter),
            _ => None,
        };
        if let Some(id) = sender {
            self.raft.note_address(&id.clone(), from);
        }
        self.raft.handle(ctx, msg);
        self.pump(ctx);
    }

    pub fn on_timer(&mut self, ctx: &mut dyn Context, token: u64) {
        self.raft.on_timer(ctx, token);
        self.pump(ctx);
    }

    pub fn take_completions(&mut self) -> Vec<Completion> {
        std::mem::take(&mut self.completions)
    }

    fn lookup(&self, scope: Scope, key: &[u8]) -> ReplicaResult {
        match self.storage.read(scope, key) {
            Some(v) => ReplicaResult::Done { status: Status::Ok, value: Some(v.to_vec()) },
            None => ReplicaResult::Done { status: Status::NotFound, value: None },
        }
    }

    fn pump(&mut self, _ctx: &mut dyn Context) {
        for ev in self.raft.take_events() {
            match ev {
                RaftEvent::ReadReady { read_id, index } => {
                    if let Some(r) = self.reads.remove(&read_id) {
                        self.ready_reads.entry(index).or_default().push(r);
                    }
                }
                RaftEvent::ReadFailed { read_id } => {
                    if let Some(r) = self.reads.remove(&read_id) {
                        let hint = self.raft.leader_hint();
                        self.completions.push(Completion { waiter: r.waiter, result: ReplicaResult::NotLeader(hint) });
                    }
                }
                RaftEvent::SteppedDown { .. } => {
                    // proposals may still commit under the next leader; callers time out otherwise
                }
                RaftEvent::BecameLeader { .. } => {}
            }
        }
        self.apply_committed();
    }

    fn apply_committed(&mut self) {
        while self.storage.applied_index() < self.raft.commit_index() {
            let index = self.storage.applied_index() + 1;
            let entry = self.raft.entry(index).expect("committed entry missing from log").clone();
            let outcome = fatal(self.storage.apply(&entry));
            if let Some(waiters) = self.proposals.remove(&index) {
                for (waiter, term) in waiters {
                    let result = if term == entry.term {
                        debug_assert!(matches!(outcome, ApplyOutcome::Applied | ApplyOutcome::Duplicate | ApplyOutcome::Skipped));
                        ReplicaResult::Done { status: Status::Ok, value: None }
                    } else {
                        ReplicaResult::NotLeader(self.raft.leader_hint())
                    };
                    self.completions.push(Completion { waiter, result });
                }
            }
        }
        let applied = self.storage.applied_index();
        while let Some((&index, _)) = self.ready_reads.first_key_value() {
            if index > applied {
                break;
            }
            for r in self.ready_reads.remove(&index).unwrap() {
                let result = self.lookup(r.scope, &r.key);
                self.completions.push(Completion { waiter: r.waiter, result });
            }
        }
    }
}

/// The copy of `entry` a learner may hold.
fn redact(entry: &LogEntry) -> LogEntry {
    match &entry.payload {
        EntryPayload::Command(c) if c.scope == Scope::Local => LogEntry { term: entry.term, index: entry.index, payload: EntryPayload::Noop },
        _ => entry.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::RecordingContext;
    use crate::wire::{Command, RequestId};

    fn members(n: usize) -> Vec<Member> {
        (1..=n).map(|i| Member { id: format!("n{i}"), address: format!("n{i}") }).collect()
    }

    fn raft(me: &str, n: usize) -> (Raft, RecordingContext) {
        let cfg = RaftConfig::new("g1", me, members(n));
        let mut r = Raft::new(cfg, RaftStore::volatile(), 0).unwrap();
        let mut ctx = RecordingContext::new(me, 7);
        r.start(&mut ctx);
        (r, ctx)
    }

    fn put(seq: u64) -> EntryPayload {
        EntryPayload::Command(Command::put(Scope::Local, b"k".to_vec(), vec![seq as u8], RequestId { client: 1, seq }))
    }

    fn vote(from: &str, term: u64, granted: bool) -> Message {
        RequestVoteResp { group: "g1".into(), term, voter: from.into(), granted }.into()
    }

    fn ae(term: u64, prev: (u64, u64), entries: Vec<LogEntry>, commit: u64) -> AppendEntries {
        AppendEntries {
            group: "g1".into(),
            term,
            leader: "n2".into(),
            prev_log_index: prev.0,
            prev_log_term: prev.1,
            entries,
            leader_commit: commit,
            read_ctx: None,
        }
    }

    fn entry(term: u64, index: u64) -> LogEntry {
        LogEntry { term, index, payload: EntryPayload::Noop }
    }

    fn last_ae_resp(ctx: &mut RecordingContext) -> AppendEntriesResp {
        ctx.take_sent()
            .into_iter()
            .rev()
            .find_map(|(_, e)| match e.message {
                Message::AppendEntriesResp(r) => Some(r),
                _ => None,
            })
            .expect("no AppendEntriesResp sent")
    }

    fn last_vote_resp(ctx: &mut RecordingContext) -> RequestVoteResp {
        ctx.take_sent()
            .into_iter()
            .rev()
            .find_map(|(_, e)| match e.message {
                Message::RequestVoteResp(r) => Some(r),
                _ => None,
            })
            .expect("no RequestVoteResp sent")
    }

    #[test]
    fn three_voters_two_votes_elects() {
        let (mut r, mut ctx) = raft("n1", 3);
        r.start_election(&mut ctx);
        assert_eq!(r.role(), RaftRole::Candidate);
        r.handle(&mut ctx, vote("n2", 1, true));
        assert_eq!(r.role(), RaftRole::Leader);
        assert_eq!(r.last_index(), 1, "leader appends a no-op");
    }

    #[test]
    fn five_voters_two_votes_stays_candidate() {
        let (mut r, mut ctx) = raft("n1", 5);
        r.start_election(&mut ctx);
        r.handle(&mut ctx, vote("n2", 1, true));
        r.handle(&mut ctx, vote("n3", 1, false));
        assert_eq!(r.quorum(), 3);
        assert_eq!(r.role(), RaftRole::Candidate);
    }

    #[test]
    fn higher_term_reply_reverts_candidate() {
        let (mut r, mut ctx) = raft("n1", 3);
        r.start_election(&mut ctx);
        r.handle(&mut ctx, vote("n2", 5, false));
        assert_eq!(r.role(), RaftRole::Follower);
        assert_eq!(r.term(), 5);
    }

    #[test]
    fn stale_vote_request_denied_with_own_term() {
        let (mut r, mut ctx) = raft("n1", 3);
        r.handle(&mut ctx, ae(4, (0, 0), vec![], 0).into());
        let req = RequestVote { group: "g1".into(), term: 3, candidate: "n3".into(), last_log_index: 9, last_log_term: 3 };
        r.handle(&mut ctx, req.into());
        let resp = last_vote_resp(&mut ctx);
        assert!(!resp.granted);
        assert_eq!(resp.term, 4);
    }

    #[test]
    fn fresh_term_empty_logs_granted_once() {
        let (mut r, mut ctx) = raft("n1", 3);
        let req = RequestVote { group: "g1".into(), term: 1, candidate: "n2".into(), last_log_index: 0, last_log_term: 0 };
        r.handle(&mut ctx, req.into());
        assert!(last_vote_resp(&mut ctx).granted);
        let other = RequestVote { group: "g1".into(), term: 1, candidate: "n3".into(), last_log_index: 0, last_log_term: 0 };
        r.handle(&mut ctx, other.into());
        assert!(!last_vote_resp(&mut ctx).granted, "one vote per term");
    }

    #[test]
    fn shorter_log_same_last_term_denied() {
        let (mut r, mut ctx) = raft("n1", 3);
        r.handle(&mut ctx, ae(1, (0, 0), vec![entry(1, 1), entry(1, 2)], 0).into());
        let req = RequestVote { group: "g1".into(), term: 2, candidate: "n3".into(), last_log_index: 1, last_log_term: 1 };
        r.handle(&mut ctx, req.into());
        assert!(!last_vote_resp(&mut ctx).granted);
    }

    #[test]
    fn heartbeat_succeeds_and_resets_timer() {
        let (mut r, mut ctx) = raft("n1", 3);
        ctx.now = ms(100);
        r.handle(&mut ctx, ae(1, (0, 0), vec![], 0).into());
        assert!(last_ae_resp(&mut ctx).success);
        assert!(r.election_deadline >= ms(250));
        assert_eq!(r.leader_id(), Some("n2"));
    }

    #[test]
    fn prev_beyond_log_rejected() {
        let (mut r, mut ctx) = raft("n1", 3);
        r.handle(&mut ctx, ae(1, (5, 1), vec![entry(1, 6)], 0).into());
        let resp = last_ae_resp(&mut ctx);
        assert!(!resp.success);
        assert_eq!(resp.last_log_index, 0);
        assert_eq!(r.last_index(), 0);
    }

    #[test]
    fn conflicting_suffix_replaced() {
        let (mut r, mut ctx) = raft("n1", 3);
        r.handle(&mut ctx, ae(1, (0, 0), vec![entry(1, 1), entry(1, 2), entry(1, 3)], 1).into());
        r.handle(&mut ctx, ae(2, (1, 1), vec![entry(2, 2)], 1).into());
        assert!(last_ae_resp(&mut ctx).success);
        let terms: Vec<u64> = r.log().iter().map(|e| e.term).collect();
        assert_eq!(terms, vec![1, 2]);
    }

    #[test]
    fn commit_is_min_of_leader_commit_and_last_new() {
        let (mut r, mut ctx) = raft("n1", 3);
        r.handle(&mut ctx, ae(1, (0, 0), vec![entry(1, 1), entry(1, 2)], 9).into());
        assert_eq!(r.commit_index(), 2);
    }

    #[test]
    fn stale_append_rejected() {
        let (mut r, mut ctx) = raft("n1", 3);
        r.handle(&mut ctx, ae(3, (0, 0), vec![], 0).into());
        r.handle(&mut ctx, ae(2, (0, 0), vec![entry(2, 1)], 0).into());
        let resp = last_ae_resp(&mut ctx);
        assert!(!resp.success);
        assert_eq!(resp.term, 3);
        assert_eq!(r.last_index(), 0);
    }

    fn leader3() -> (Raft, RecordingContext) {
        let (mut r, mut ctx) = raft("n1", 3);
        r.start_election(&mut ctx);
        r.handle(&mut ctx, vote("n2", 1, true));
        assert!(r.is_leader());
        ctx.take_sent();
        (r, ctx)
    }

    fn ack(from: &str, term: u64, matched: u64, read_ctx: Option<u64>) -> Message {
        AppendEntriesResp { group: "g1".into(), term, from: from.into(), success: true, match_index: matched, last_log_index: matched, read_ctx }
            .into()
    }

    #[test]
    fn commit_needs_majority_of_voters() {
        let (mut r, mut ctx) = leader3();
        let (idx, _) = r.propose(&mut ctx, put(1)).unwrap();
        assert_eq!(idx, 2);
        assert_eq!(r.commit_index(), 0);
        r.handle(&mut ctx, ack("n2", 1, 2, None));
        assert_eq!(r.commit_index(), 2);
    }

    #[test]
    fn learner_not_counted() {
        let (mut r, mut ctx) = leader3();
        let learner = Member { id: "b1".into(), address: "b1".into() };
        r.set_learners(&mut ctx, vec![learner.clone()]).unwrap();
        assert_eq!(r.set_learners(&mut ctx, vec![learner]).unwrap(), None, "idempotent");
        assert_eq!(r.quorum(), 2);
        r.handle(&mut ctx, ack("b1", 1, 2, None));
        assert_eq!(r.commit_index(), 0, "learner ack alone must not commit");
        r.handle(&mut ctx, ack("n3", 1, 2, None));
        assert_eq!(r.commit_index(), 2);
    }

    #[test]
    fn replaced_learners_stop_receiving_entries() {
        let (mut r, mut ctx) = leader3();
        let b = |id: &str| Member { id: id.into(), address: id.into() };
        r.set_learners(&mut ctx, vec![b("b1"), b("b2")]).unwrap();
        r.set_learners(&mut ctx, vec![b("c1")]).unwrap();
        assert_eq!(r.learners().map(|m| m.id.as_str()).collect::<Vec<_>>(), ["c1"]);
        assert!(!r.progress.contains_key("b1") && !r.progress.contains_key("b2"));
        assert!(r.progress.contains_key("c1"));
    }

    #[test]
    fn learner_never_votes() {
        let cfg = RaftConfig::new("g1", "b1", members(3));
        let mut r = Raft::new(cfg, RaftStore::volatile(), 0).unwrap();
        let mut ctx = RecordingContext::new("b1", 1);
        r.start(&mut ctx);
        assert_eq!(r.role(), RaftRole::Learner);
        assert!(ctx.timers.is_empty(), "learners arm no election timer");
        r.start_election(&mut ctx);
        assert_eq!(r.role(), RaftRole::Learner);
    }

    #[test]
    fn vote_from_non_voter_ignored() {
        let (mut r, mut ctx) = raft("n1", 3);
        r.start_election(&mut ctx);
        r.handle(&mut ctx, vote("b1", 1, true));
        assert_eq!(r.role(), RaftRole::Candidate);
    }

    #[test]
    fn read_index_waits_for_heartbeat_quorum() {
        let (mut r, mut ctx) = leader3();
        r.handle(&mut ctx, ack("n2", 1, 1, None));
        assert_eq!(r.commit_index(), 1);
        r.take_events();
        r.read_index(&mut ctx, 42).unwrap();
        let seq = ctx
            .take_sent()
            .into_iter()
            .find_map(|(_, e)| match e.message {
                Message::AppendEntries(a) => a.read_ctx,
                _ => None,
            })
            .unwrap();
        assert!(r.take_events().is_empty());
        r.handle(&mut ctx, ack("n3", 1, 1, Some(seq)));
        assert_eq!(r.take_events(), vec![RaftEvent::ReadReady { read_id: 42, index: 1 }]);
    }

    #[test]
    fn read_index_before_noop_commit_is_deferred() {
        let (mut r, mut ctx) = leader3();
        r.read_index(&mut ctx, 1).unwrap();
        assert!(r.take_events().iter().all(|e| !matches!(e, RaftEvent::ReadReady { .. })));
        r.handle(&mut ctx, ack("n2", 1, 1, None));
        let seq = r.read_seq;
        assert_eq!(seq, 1);
        r.handle(&mut ctx, ack("n2", 1, 1, Some(seq)));
        assert!(r.take_events().contains(&RaftEvent::ReadReady { read_id: 1, index: 1 }));
    }

    #[test]
    fn stepping_down_fails_pending_reads() {
        let (mut r, mut ctx) = leader3();
        r.handle(&mut ctx, ack("n2", 1, 1, None));
        r.read_index(&mut ctx, 9).unwrap();
        r.handle(&mut ctx, ae(2, (0, 0), vec![], 0).into());
        let ev = r.take_events();
        assert!(ev.contains(&RaftEvent::ReadFailed { read_id: 9 }));
        assert_eq!(r.role(), RaftRole::Follower);
    }

    #[test]
    fn non_leader_redirects_with_hint() {
        let (mut r, mut ctx) = raft("n1", 3);
        r.handle(&mut ctx, ae(1, (0, 0), vec![], 0).into());
        let err = r.propose(&mut ctx, put(1)).unwrap_err();
        assert_eq!(err.leader_hint.map(|m| m.id), Some("n2".to_string()));
    }

    #[test]
    fn reject_backs_off_one_or_to_follower_end() {
        let (mut r, mut ctx) = leader3();
        for s in 1..=5 {
            r.propose(&mut ctx, put(s)).unwrap();
        }
        // n2 is probing at next = 2 (became leader with last = 0, no-op at 1)
        let reject = |prev, last| -> Message {
            AppendEntriesResp { group: "g1".into(), term: 1, from: "n2".into(), success: false, match_index: prev, last_log_index: last, read_ctx: None }
                .into()
        };
        r.progress.get_mut("n2").unwrap().next = 6;
        r.handle(&mut ctx, reject(5, 9));
        assert_eq!(r.progress["n2"].next, 5);
        r.handle(&mut ctx, reject(3, 9));
        assert_eq!(r.progress["n2"].next, 5, "stale reject ignored");
        r.handle(&mut ctx, reject(4, 1));
        assert_eq!(r.progress["n2"].next, 2);
    }

    #[test]
    fn check_quorum_steps_down_when_isolated() {
        let (mut r, mut ctx) = leader3();
        let hb = TIMER_HEARTBEAT | (r.heartbeat_gen & 0x0fff_ffff);
        ctx.now = ms(400);
        r.on_timer(&mut ctx, hb);
        assert_eq!(r.role(), RaftRole::Follower);
    }

    #[test]
    fn replica_applies_and_completes() {
        let (r, mut ctx) = leader3();
        let mut rep = Replica::new(r, StorageEngine::in_memory());
        rep.propose(&mut ctx, 7, put(1));
        assert!(rep.take_completions().is_empty());
        rep.handle(&mut ctx, "n2", ack("n2", 1, 2, None));
        let done = rep.take_completions();
        assert_eq!(done, vec![Completion { waiter: 7, result: ReplicaResult::Done { status: Status::Ok, value: None } }]);
        rep.read(&mut ctx, 8, Scope::Local, b"k".to_vec(), ReadMode::Serializable);
        assert_eq!(rep.take_completions()[0].result, ReplicaResult::Done { status: Status::Ok, value: Some(vec![1]) });
        rep.read(&mut ctx, 9, Scope::Local, b"nope".to_vec(), ReadMode::Serializable);
        assert_eq!(rep.take_completions()[0].result, ReplicaResult::Done { status: Status::NotFound, value: None });
    }

    #[test]
    fn persisted_state_survives_restart() {
        use crate::storage::{MemDir, StorageOptions};
        use std::sync::Arc;
        let dir: Arc<dyn crate::storage::Dir> = Arc::new(MemDir::new());
        let cfg = RaftConfig::new("g1", "n1", members(3));
        let mut r = Raft::new(cfg.clone(), RaftStore::new(dir.clone(), StorageOptions::default()), 0).unwrap();
        let mut ctx = RecordingContext::new("n1", 3);
        r.handle(&mut ctx, ae(3, (0, 0), vec![entry(3, 1), entry(3, 2)], 0).into());
        let req = RequestVote { group: "g1".into(), term: 4, candidate: "n3".into(), last_log_index: 2, last_log_term: 3 };
        r.handle(&mut ctx, req.into());
        drop(r);
        let r = Raft::new(cfg, RaftStore::new(dir, StorageOptions::default()), 0).unwrap();
        assert_eq!(r.term(), 4);
        assert_eq!(r.voted_for.as_deref(), Some("n3"));
        assert_eq!(r.last_index(), 2);
    }
}
