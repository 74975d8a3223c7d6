//! Randomized fault injection against one edge group.
//!
//! Clients issue a random mix of puts, deletes and linearizable reads while
//! the leader is crashed and restarted and single nodes are cut off. The
//! recorded history is then checked for linearizability, the leadership
//! record for two leaders in one term, and the replicas for divergence.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster::{ClusterOptions, ClusterTopology, SimCluster};
use crate::error::Result;
use crate::linearizability::{check, HistoryOp, KvOp, Violation};
use crate::transport::{ms, Context, Observation, Process, Tick};
use crate::wire::{ClientDelete, ClientGet, ClientPut, Envelope, Message, ReadMode, RequestId, Scope, Status};

const NEXT: u64 = 1 << 40;
const GIVE_UP: u64 = 2 << 40;
const MASK: u64 = (1 << 40) - 1;

/// A closed-loop client that records what it saw.
pub struct HistoryClient {
    id: u64,
    targets: Vec<String>,
    target: usize,
    rng: ChaCha8Rng,
    keys: Vec<Vec<u8>>,
    budget: usize,
    seq: u64,
    /// Envelope id and history index of the outstanding operation.
    pending: Option<(u64, usize)>,
    history: Vec<HistoryOp>,
    /// Client-side deadline for an answer, above the node's own timeouts.
    give_up_after: Tick,
}

impl HistoryClient {
    pub fn new(id: u64, targets: Vec<String>, seed: u64, keys: usize, budget: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id);
        let target = (id as usize) % targets.len();
        HistoryClient {
            id,
            targets,
            target,
            rng,
            keys: (0..keys).map(|k| format!("k{k}").into_bytes()).collect(),
            budget,
            seq: 0,
            pending: None,
            history: Vec::new(),
            give_up_after: ms(3000),
        }
    }

    pub fn history(&self) -> &[HistoryOp] {
        &self.history
    }

    pub fn finished(&self) -> bool {
        self.budget == 0 && self.pending.is_none()
    }

    fn issue(&mut self, ctx: &mut dyn Context) {
        if self.budget == 0 || self.pending.is_some() {
            return;
        }
        self.budget -= 1;
        self.seq += 1;
        let key = self.keys[self.rng.random_range(0..self.keys.len())].clone();
        let rid = RequestId { client: self.id, seq: self.seq };
        let roll: f64 = self.rng.random();
        let (op, msg): (KvOp, Message) = if roll < 0.4 {
            let v = format!("c{}-{}", self.id, self.seq).into_bytes();
            (KvOp::Put(v.clone()), ClientPut { scope: Scope::Local, key: key.clone(), value: v, request_id: rid }.into())
        } else if roll < 0.55 {
            (KvOp::Delete, ClientDelete { scope: Scope::Local, key: key.clone(), request_id: rid }.into())
        } else {
            (KvOp::Get(None), ClientGet { scope: Scope::Local, key: key.clone(), mode: ReadMode::Linearizable }.into())
        };
        ctx.begin_cause();
        let env_id = ctx.next_id();
        ctx.send(&self.targets[self.target], Envelope::new(env_id, msg));
        self.history.push(HistoryOp { client: self.id, key, op, invoked: ctx.now(), returned: None });
        self.pending = Some((env_id, self.history.len() - 1));
        ctx.set_timer(self.give_up_after, GIVE_UP | env_id);
    }

    /// Leaves the outcome unknown and moves to another node.
    fn abandon(&mut self, ctx: &mut dyn Context) {
        self.pending = None;
        self.target = (self.target + 1) % self.targets.len();
        self.think(ctx);
    }

    fn think(&mut self, ctx: &mut dyn Context) {
        let delay = self.rng.random_range(0..ms(20));
        ctx.set_timer(delay, NEXT);
    }
}

impl Process for HistoryClient {
    fn start(&mut self, ctx: &mut dyn Context) {
        self.think(ctx);
    }

    fn on_message(&mut self, ctx: &mut dyn Context, _from: &str, env: Envelope) {
        let Message::ClientResponse(resp) = env.message else {
            return;
        };
        let Some((id, idx)) = self.pending else {
            return;
        };
        if env.id != id {
            return;
        }
        let h = &mut self.history[idx];
        match resp.status {
            Status::Ok | Status::NotFound => {
                if let KvOp::Get(seen) = &mut h.op {
                    *seen = if resp.status == Status::Ok { resp.value } else { None };
                }
                h.returned = Some(ctx.now());
                self.pending = None;
                self.think(ctx);
            }
            _ => self.abandon(ctx),
        }
    }

    fn on_timer(&mut self, ctx: &mut dyn Context, token: u64) {
        match token & !MASK {
            NEXT => self.issue(ctx),
            GIVE_UP if self.pending.is_some_and(|(id, _)| id == token & MASK) => self.abandon(ctx),
            _ => {}
        }
    }

    crate::impl_any!();
}

#[derive(Clone, Debug)]
pub struct ChaosOutcome {
    pub seed: u64,
    pub history: Vec<HistoryOp>,
    pub completed: usize,
    pub unknown: usize,
    pub violations: Vec<Violation>,
    /// Terms in which two different nodes became leader.
    pub dual_leader_terms: Vec<u64>,
    /// Final state hash per replica.
    pub state_hashes: BTreeMap<String, [u8; 32]>,
    pub faults: Vec<String>,
}

impl ChaosOutcome {
    pub fn hashes_agree(&self) -> bool {
        self.state_hashes.values().collect::<BTreeSet<_>>().len() == 1
    }

    pub fn clean(&self) -> bool {
        self.violations.is_empty() && self.dual_leader_terms.is_empty() && self.hashes_agree()
    }
}

/// One seeded run: three nodes, three clients, `ops` operations in total.
pub fn run_group_chaos(seed: u64, ops: usize) -> Result<ChaosOutcome> {
    let mut c = SimCluster::build(ClusterTopology::uniform(1, 3, 1), seed, ClusterOptions::default())?;
    c.wait_ready(ms(30_000))?;
    let nodes = c.edge_nodes("g1");
    let clients: Vec<String> = (1..=3).map(|i| format!("c{i}")).collect();
    for (i, name) in clients.iter().enumerate() {
        let share = ops / 3 + usize::from(i < ops % 3);
        c.add_client(name, Box::new(HistoryClient::new(i as u64 + 1, nodes.clone(), seed, 4, share)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut faults = Vec::new();
    let horizon = c.sim.now() + ms(600_000);
    let done = |c: &SimCluster| clients.iter().all(|n| c.sim.node::<HistoryClient>(n).is_some_and(HistoryClient::finished));
    while !done(&c) && c.sim.now() < horizon {
        c.sim.advance(rng.random_range(ms(300)..ms(800)));
        if let Some(leader) = c.leader_of("g1") {
            faults.push(format!("{}: crash {leader}", c.sim.now()));
            c.crash(&leader);
            c.sim.advance(rng.random_range(ms(500)..ms(1500)));
            c.restart(&leader)?;
            faults.push(format!("{}: restart {leader}", c.sim.now()));
        }
        c.sim.advance(rng.random_range(ms(300)..ms(800)));
        let victim = nodes[rng.random_range(0..nodes.len())].clone();
        faults.push(format!("{}: isolate {victim}", c.sim.now()));
        c.sim.isolate(&[&victim]);
        c.sim.advance(rng.random_range(ms(500)..ms(1500)));
        c.heal();
        faults.push(format!("{}: heal", c.sim.now()));
    }
    c.heal();
    c.sim.run_until_done(horizon.saturating_sub(c.sim.now()).max(ms(30_000)), |s| {
        clients.iter().all(|n| s.node::<HistoryClient>(n).is_some_and(HistoryClient::finished))
    })?;
    // Let the last commits reach every follower.
    c.sim.advance(ms(3000));

    let history: Vec<HistoryOp> = clients.iter().flat_map(|n| c.sim.node::<HistoryClient>(n).unwrap().history().to_vec()).collect();
    let violations = check(&history);
    let mut leaders: BTreeMap<u64, BTreeSet<&str>> = BTreeMap::new();
    for (_, node, obs) in c.sim.observations() {
        if let Observation::BecameLeader { group, term } = obs {
            if group == "g1" {
                leaders.entry(*term).or_default().insert(node);
            }
        }
    }
    let dual_leader_terms = leaders.into_iter().filter(|(_, n)| n.len() > 1).map(|(t, _)| t).collect();
    let state_hashes = nodes.iter().map(|n| (n.clone(), c.edge(n).unwrap().replica().storage.state_hash())).collect();
    let completed = history.iter().filter(|h| h.returned.is_some()).count();
    Ok(ChaosOutcome { seed, completed, unknown: history.len() - completed, history, violations, dual_leader_terms, state_hashes, faults })
}
