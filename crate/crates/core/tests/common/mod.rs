//! Helpers shared by the integration tests.
#![allow(dead_code)]

use edgekv::chord::{ChordConfig, OverlayHost, OverlayPeer};
use edgekv::client::ScriptClient;
use edgekv::cluster::SimCluster;
use edgekv::ring::{Identifier, RingSpace};
use edgekv::transport::sim::{NodeInfo, Sim};
use edgekv::transport::{ms, Context, Role, TopologyProfile};
use edgekv::wire::ClientResponse;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn host_name(i: usize) -> String {
    format!("gw-{i}")
}

pub fn build_overlay(seed: u64, hosts: usize, vnodes: usize, cfg: ChordConfig) -> Sim {
    let mut sim = Sim::new(seed, TopologyProfile::EDGE);
    for i in 1..=hosts {
        let boot = (i > 1).then(|| host_name(1));
        let host = OverlayHost::new(&host_name(i), &host_name(i), vnodes, cfg, boot).unwrap();
        sim.add_node(&host_name(i), NodeInfo::new(Role::Gateway, None), Box::new(OverlayPeer::new(host)));
        sim.advance(cfg.join_stagger * vnodes as u64 + ms(50));
    }
    sim
}

pub fn live_ids(sim: &Sim, hosts: &[usize]) -> Vec<Identifier> {
    let mut ids: Vec<Identifier> = hosts
        .iter()
        .flat_map(|&i| sim.node::<OverlayPeer>(&host_name(i)).unwrap().host.vnodes().iter().map(|v| v.id()).collect::<Vec<_>>())
        .collect();
    ids.sort();
    ids
}

pub fn oracle(ids: &[Identifier], x: Identifier) -> Identifier {
    *ids.iter().find(|&&i| i >= x).unwrap_or(&ids[0])
}

pub fn converged(sim: &Sim, hosts: &[usize], space: RingSpace) -> bool {
    let ids = live_ids(sim, hosts);
    hosts.iter().all(|&i| {
        sim.node::<OverlayPeer>(&host_name(i)).unwrap().host.vnodes().iter().all(|v| {
            let pos = ids.iter().position(|&x| x == v.id()).unwrap();
            let succ = ids[(pos + 1) % ids.len()];
            let pred = ids[(pos + ids.len() - 1) % ids.len()];
            v.is_joined()
                && v.successor().id == succ
                && (ids.len() == 1 || v.predecessor().map(|p| p.id) == Some(pred))
                && (1..=space.bits()).all(|f| {
                    let start = space.finger_start(v.id(), f).unwrap();
                    ids.len() == 1 || v.finger(f).map(|n| n.id) == Some(oracle(&ids, start))
                })
        })
    })
}

pub fn converge(sim: &mut Sim, hosts: &[usize], space: RingSpace) {
    let all: Vec<usize> = hosts.to_vec();
    sim.run_until_done(ms(120_000), |s| converged(s, &all, space)).expect("overlay did not converge");
}

pub fn lookups(sim: &mut Sim, hosts: &[usize], n: usize, seed: u64) -> Vec<(Identifier, Identifier, u32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for w in 0..n as u64 {
        let key = Identifier(rng.random());
        let from = host_name(hosts[rng.random_range(0..hosts.len())]);
        sim.invoke::<OverlayPeer, _>(&from, |p, ctx| p.locate(ctx, key, w)).unwrap();
        sim.run_until_done(ms(10_000), |s| s.node::<OverlayPeer>(&from).unwrap().located(w).is_some()).expect("lookup lost");
        let (owner, hops) = sim.node::<OverlayPeer>(&from).unwrap().located(w).unwrap();
        out.push((key, owner.id, hops));
    }
    out
}


/// Issues one request from a [`ScriptClient`] and waits for its answer.
pub fn call(c: &mut SimCluster, client: &str, f: impl FnOnce(&mut ScriptClient, &mut dyn Context) -> u64) -> ClientResponse {
    let id = c.sim.invoke::<ScriptClient, _>(client, f).unwrap();
    let name = client.to_string();
    c.sim
        .run_until_done(ms(20_000), |s| s.node::<ScriptClient>(&name).unwrap().reply(id).is_some())
        .expect("no reply");
    c.sim.node::<ScriptClient>(client).unwrap().reply(id).unwrap().clone()
}
