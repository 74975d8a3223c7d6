mod common;

use common::*;
use edgekv::chord::{ChordConfig, ChordEvent, OverlayHost, OverlayPeer};
use edgekv::ring::{Identifier, RingSpace};
use edgekv::transport::sim::{NodeInfo, Sim};
use edgekv::transport::{ms, Role, TopologyProfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn single_node_owns_everything() {
    let cfg = ChordConfig::default();
    let mut sim = build_overlay(1, 1, 1, cfg);
    converge(&mut sim, &[1], cfg.space);
    for (_, owner, hops) in lookups(&mut sim, &[1], 20, 1) {
        assert_eq!(owner, live_ids(&sim, &[1])[0]);
        assert_eq!(hops, 0);
    }
}

#[test]
fn two_nodes_are_each_others_neighbours() {
    let cfg = ChordConfig::default();
    let mut sim = build_overlay(2, 2, 1, cfg);
    sim.advance(cfg.stabilize * 4);
    assert!(converged(&sim, &[1, 2], cfg.space));
}

#[test]
fn sixteen_sequential_joins_form_sorted_ring() {
    let cfg = ChordConfig::default();
    let hosts: Vec<usize> = (1..=16).collect();
    let mut sim = build_overlay(3, 16, 1, cfg);
    converge(&mut sim, &hosts, cfg.space);
    let ids = live_ids(&sim, &hosts);
    // walk successors from the first node
    let first = sim.node::<OverlayPeer>(&host_name(1)).unwrap().host.vnodes()[0].id();
    let mut cur = first;
    let mut seen = vec![cur];
    loop {
        let next = hosts
            .iter()
            .flat_map(|&i| sim.node::<OverlayPeer>(&host_name(i)).unwrap().host.vnodes().to_vec_ids())
            .find(|(id, _)| *id == cur)
            .unwrap()
            .1;
        if next == first {
            break;
        }
        seen.push(next);
        cur = next;
    }
    seen.sort();
    assert_eq!(seen, ids);
}

trait VnodeIds {
    fn to_vec_ids(&self) -> Vec<(Identifier, Identifier)>;
}

impl VnodeIds for [edgekv::chord::ChordNode] {
    fn to_vec_ids(&self) -> Vec<(Identifier, Identifier)> {
        self.iter().map(|v| (v.id(), v.successor().id)).collect()
    }
}

#[test]
fn small_ring_exact_with_8_bit_ids() {
    let cfg = ChordConfig { space: RingSpace::new(8).unwrap(), ..ChordConfig::default() };
    let hosts: Vec<usize> = (1..=4).collect();
    let mut sim = build_overlay(4, 4, 2, cfg);
    converge(&mut sim, &hosts, cfg.space);
    let ids = live_ids(&sim, &hosts);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for w in 0..200u64 {
        let key = Identifier(rng.random_range(0..256));
        let from = host_name(rng.random_range(1..=4));
        sim.invoke::<OverlayPeer, _>(&from, |p, ctx| p.locate(ctx, key, w)).unwrap();
        sim.run_until_done(ms(10_000), |s| s.node::<OverlayPeer>(&from).unwrap().located(w).is_some()).unwrap();
        let (owner, _) = sim.node::<OverlayPeer>(&from).unwrap().located(w).unwrap();
        assert_eq!(owner.id, oracle(&ids, key), "key {key:?}");
    }
}

#[test]
fn lookups_agree_with_oracle_on_32_vnodes() {
    let cfg = ChordConfig::default();
    let hosts: Vec<usize> = (1..=8).collect();
    let mut sim = build_overlay(5, 8, 4, cfg);
    converge(&mut sim, &hosts, cfg.space);
    let ids = live_ids(&sim, &hosts);
    for (key, owner, hops) in lookups(&mut sim, &hosts, 1000, 5) {
        assert_eq!(owner, oracle(&ids, key));
        assert!(hops <= 64);
    }
}

#[test]
fn vnodes_share_physical_id() {
    let host = OverlayHost::new("gw-1", "gw-1", 8, ChordConfig::default(), None).unwrap();
    let refs = host.vnode_refs();
    assert!(refs.windows(2).all(|w| w[0].physical_id == w[1].physical_id));
    assert!(OverlayHost::new("gw-1", "gw-1", 0, ChordConfig::default(), None).is_err());
}

#[test]
fn ring_repairs_after_node_death() {
    let cfg = ChordConfig::default();
    let hosts: Vec<usize> = (1..=8).collect();
    let mut sim = build_overlay(6, 8, 1, cfg);
    converge(&mut sim, &hosts, cfg.space);
    sim.crash(&host_name(5));
    let alive: Vec<usize> = hosts.iter().copied().filter(|&h| h != 5).collect();
    let t = sim
        .run_until_done(ms(120_000), |s| {
            let ids = live_ids(s, &alive);
            alive.iter().all(|&i| {
                let v = &s.node::<OverlayPeer>(&host_name(i)).unwrap().host.vnodes()[0];
                let pos = ids.iter().position(|&x| x == v.id()).unwrap();
                v.successor().id == ids[(pos + 1) % ids.len()]
            })
        })
        .expect("ring not repaired");
    assert!(t <= cfg.successors as u64 * (cfg.stabilize + cfg.rpc_timeout), "repair took {t} ticks");
    converge(&mut sim, &alive, cfg.space);
}

#[test]
fn join_with_dead_bootstrap_fails() {
    let cfg = ChordConfig::default();
    let mut sim = Sim::new(7, TopologyProfile::EDGE);
    let host = OverlayHost::new("gw-2", "gw-2", 1, cfg, Some("gw-1".into())).unwrap();
    sim.add_node("gw-2", NodeInfo::new(Role::Gateway, None), Box::new(OverlayPeer::new(host)));
    sim.advance(ms(10_000));
    let p = sim.node::<OverlayPeer>("gw-2").unwrap();
    assert!(p.events.iter().any(|(_, _, e)| *e == ChordEvent::JoinFailed));
    assert!(!p.host.is_joined());
}

#[test]
fn duplicate_identity_is_a_collision() {
    let cfg = ChordConfig::default();
    let mut sim = build_overlay(8, 1, 1, cfg);
    // same physical name, different address: identical vnode ids
    let twin = OverlayHost::new("gw-1", "gw-1b", 1, cfg, Some("gw-1".into())).unwrap();
    sim.add_node("gw-1b", NodeInfo::new(Role::Gateway, None), Box::new(OverlayPeer::new(twin)));
    sim.advance(ms(2000));
    let p = sim.node::<OverlayPeer>("gw-1b").unwrap();
    assert!(p.events.iter().any(|(_, _, e)| matches!(e, ChordEvent::IdCollision(_))), "{:?}", p.events);
}

#[test]
fn hop_count_on_64_vnodes() {
    let cfg = ChordConfig::default();
    let hosts: Vec<usize> = (1..=8).collect();
    let mut sim = build_overlay(10, 8, 8, cfg);
    let t0 = sim.now();
    converge(&mut sim, &hosts, cfg.space);
    let res = lookups(&mut sim, &hosts, 1000, 10);
    let mean = res.iter().map(|r| r.2 as f64).sum::<f64>() / res.len() as f64;
    let max = res.iter().map(|r| r.2).max().unwrap();
    eprintln!("converged after {} ms, mean hops {mean:.2}, max {max}", (sim.now() - t0) / 100);
    assert!(mean <= 8.0 && max <= 64);
}

/// Every vnode, keyed by id: successor id, finger count, and the number
/// of other neighbours held.
fn routing(sim: &Sim, hosts: &[usize]) -> std::collections::BTreeMap<Identifier, (Identifier, usize, usize)> {
    hosts
        .iter()
        .flat_map(|&i| {
            sim.node::<OverlayPeer>(&host_name(i))
                .unwrap()
                .host
                .vnodes()
                .iter()
                .map(|v| {
                    let neighbours = v.successor_list().len() + usize::from(v.predecessor().is_some());
                    (v.id(), (v.successor().id, v.fingers().count(), neighbours))
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn successor_walk_visits_every_vnode_once() {
    let cfg = ChordConfig::default();
    for (hosts, vnodes) in [(1usize, 1usize), (2, 1), (4, 2), (8, 4), (8, 8)] {
        let all: Vec<usize> = (1..=hosts).collect();
        let mut sim = build_overlay(hosts as u64 * 31 + vnodes as u64, hosts, vnodes, cfg);
        converge(&mut sim, &all, cfg.space);
        let table = routing(&sim, &all);
        assert_eq!(table.len(), hosts * vnodes);
        for &start in table.keys() {
            let mut seen = std::collections::BTreeSet::new();
            let mut at = start;
            loop {
                assert!(seen.insert(at), "{at} visited twice");
                at = table[&at].0;
                if at == start {
                    break;
                }
            }
            assert_eq!(seen.len(), table.len());
        }
        for (id, &(_, fingers, rest)) in &table {
            assert!(fingers <= cfg.space.bits() as usize, "{id} holds {fingers} fingers");
            assert!(rest <= cfg.successors + 1, "{id} holds {rest} neighbours");
        }
    }
}

#[test]
fn every_gateway_names_the_same_owner() {
    let cfg = ChordConfig::default();
    let hosts: Vec<usize> = (1..=6).collect();
    let mut sim = build_overlay(44, 6, 3, cfg);
    converge(&mut sim, &hosts, cfg.space);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut waiter = 0;
    for _ in 0..100 {
        let key = Identifier(rng.random());
        let mut owners = std::collections::BTreeSet::new();
        for &h in &hosts {
            waiter += 1;
            let name = host_name(h);
            sim.invoke::<OverlayPeer, _>(&name, |p, ctx| p.locate(ctx, key, waiter)).unwrap();
            sim.run_until_done(ms(10_000), |s| s.node::<OverlayPeer>(&name).unwrap().located(waiter).is_some()).unwrap();
            owners.insert(sim.node::<OverlayPeer>(&name).unwrap().located(waiter).unwrap().0.id);
        }
        assert_eq!(owners.len(), 1, "gateways disagree on {key}");
    }
}
