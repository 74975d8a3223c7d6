use edgekv::client::ScriptClient;
use edgekv::cluster::{ClusterOptions, ClusterTopology, SimCluster};
use edgekv::edge::EdgeNode;
use edgekv::gateway::Gateway;
use edgekv::transport::ms;
use edgekv::wire::{ClientResponse, MessageKind, ReadMode, Scope, Status};

fn cluster(seed: u64, groups: usize, opts: ClusterOptions) -> SimCluster {
    let mut c = SimCluster::build(ClusterTopology::uniform(groups, 3, 1), seed, opts).unwrap();
    c.wait_ready(ms(60_000)).expect("cluster never became ready");
    for g in 1..=groups {
        c.add_client(&format!("c{g}"), Box::new(ScriptClient::new(g as u64, format!("g{g}-n1"))));
    }
    c
}

fn call(c: &mut SimCluster, client: &str, f: impl FnOnce(&mut ScriptClient, &mut dyn edgekv::transport::Context) -> u64) -> ClientResponse {
    let id = c.sim.invoke::<ScriptClient, _>(client, f).unwrap();
    let name = client.to_string();
    c.sim
        .run_until_done(ms(20_000), |s| s.node::<ScriptClient>(&name).unwrap().reply(id).is_some())
        .expect("no reply");
    c.sim.node::<ScriptClient>(client).unwrap().reply(id).unwrap().clone()
}

/// A key whose owner is `group`.
fn key_owned_by(c: &SimCluster, group: &str) -> Vec<u8> {
    (0..)
        .map(|i| format!("key-{i}").into_bytes())
        .find(|k| c.owner_group(k).as_deref() == Some(group))
        .unwrap()
}

fn stored_in(c: &SimCluster, group: &str, key: &[u8]) -> usize {
    c.edge_nodes(group)
        .iter()
        .filter(|n| c.edge(n).unwrap().replica().storage.read(Scope::Global, key).is_some())
        .count()
}

#[test]
fn single_group_needs_no_gateway_traffic() {
    let mut c = cluster(11, 1, ClusterOptions::default());
    let before = c.sim.sent_by_kind().get(&MessageKind::FindSuccessor).copied().unwrap_or(0);
    for i in 0..20 {
        let k = format!("k{i}");
        let r = call(&mut c, "c1", |cl, ctx| cl.put(ctx, Scope::Global, k.as_bytes(), b"v"));
        assert_eq!(r.status, Status::Ok);
    }
    let r = call(&mut c, "c1", |cl, ctx| cl.get(ctx, Scope::Global, b"k7", ReadMode::Linearizable));
    assert_eq!(r.value.as_deref(), Some(&b"v"[..]));
    let after = c.sim.sent_by_kind().get(&MessageKind::FindSuccessor).copied().unwrap_or(0);
    assert_eq!(after, before, "a lone gateway never looks up");
    let s = c.gateway_node("g1").unwrap().stats();
    assert_eq!((s.forwarded, s.served_locally), (0, 21));
}

#[test]
fn global_put_lands_only_in_owner_group() {
    let mut c = cluster(12, 3, ClusterOptions::default());
    for owner in ["g1", "g2", "g3"] {
        let key = key_owned_by(&c, owner);
        let r = call(&mut c, "c1", |cl, ctx| cl.put(ctx, Scope::Global, &key, b"x"));
        assert_eq!(r.status, Status::Ok, "put owned by {owner}");
        c.sim.advance(ms(300));
        for g in ["g1", "g2", "g3"] {
            let n = stored_in(&c, g, &key);
            if g == owner {
                assert_eq!(n, 3, "owner {owner} replicas");
            } else {
                // Backups only hold learner copies on the owner's backup members.
                let backup_of_owner = c.gateway_node(owner).unwrap().backup().map(|b| b.group.clone());
                if backup_of_owner.as_deref() != Some(g) {
                    assert_eq!(n, 0, "key owned by {owner} leaked into {g}");
                }
            }
        }
        let r = call(&mut c, "c3", |cl, ctx| cl.get(ctx, Scope::Global, &key, ReadMode::Linearizable));
        assert_eq!((r.status, r.value.as_deref()), (Status::Ok, Some(&b"x"[..])));
    }
}

#[test]
fn global_delete_routes_to_owner() {
    let mut c = cluster(13, 3, ClusterOptions::default());
    let key = key_owned_by(&c, "g3");
    assert_eq!(call(&mut c, "c1", |cl, ctx| cl.put(ctx, Scope::Global, &key, b"x")).status, Status::Ok);
    assert_eq!(call(&mut c, "c2", |cl, ctx| cl.delete(ctx, Scope::Global, &key)).status, Status::Ok);
    let r = call(&mut c, "c1", |cl, ctx| cl.get(ctx, Scope::Global, &key, ReadMode::Linearizable));
    assert_eq!(r.status, Status::NotFound);
}

#[test]
fn local_and_global_namespaces_are_disjoint() {
    let mut c = cluster(14, 2, ClusterOptions::default());
    assert_eq!(call(&mut c, "c1", |cl, ctx| cl.put(ctx, Scope::Local, b"same", b"local")).status, Status::Ok);
    assert_eq!(call(&mut c, "c1", |cl, ctx| cl.put(ctx, Scope::Global, b"same", b"global")).status, Status::Ok);
    let l = call(&mut c, "c1", |cl, ctx| cl.get(ctx, Scope::Local, b"same", ReadMode::Linearizable));
    let g = call(&mut c, "c2", |cl, ctx| cl.get(ctx, Scope::Global, b"same", ReadMode::Linearizable));
    assert_eq!(l.value.as_deref(), Some(&b"local"[..]));
    assert_eq!(g.value.as_deref(), Some(&b"global"[..]));
    let other = call(&mut c, "c2", |cl, ctx| cl.get(ctx, Scope::Local, b"same", ReadMode::Linearizable));
    assert_eq!(other.status, Status::NotFound);
}

#[test]
fn cache_serves_repeat_lookups() {
    let mut c = cluster(15, 3, ClusterOptions::default());
    let key = key_owned_by(&c, "g2");
    for _ in 0..5 {
        assert_eq!(call(&mut c, "c1", |cl, ctx| cl.put(ctx, Scope::Global, &key, b"x")).status, Status::Ok);
    }
    let s = c.gateway_node("g1").unwrap().stats().clone();
    assert_eq!(s.cache_misses, 1);
    assert_eq!(s.cache_hits, 4);
}

#[test]
fn cache_on_and_off_agree_on_results() {
    let run = |capacity: usize| {
        let opts = ClusterOptions { cache_capacity: capacity, ..ClusterOptions::default() };
        let mut c = cluster(16, 3, opts);
        let mut out = Vec::new();
        for i in 0..30 {
            let k = format!("k{}", i % 10);
            let v = format!("v{i}");
            let client = format!("c{}", 1 + i % 3);
            out.push(call(&mut c, &client, |cl, ctx| cl.put(ctx, Scope::Global, k.as_bytes(), v.as_bytes())).status);
            let r = call(&mut c, &client, |cl, ctx| cl.get(ctx, Scope::Global, k.as_bytes(), ReadMode::Linearizable));
            out.push(r.status);
            assert_eq!(r.value.as_deref(), Some(v.as_bytes()));
        }
        let lookups = c.sim.sent_by_kind().get(&MessageKind::FindSuccessor).copied().unwrap_or(0);
        (out, lookups)
    };
    let (with, lookups_cached) = run(1024);
    let (without, lookups_uncached) = run(0);
    assert_eq!(with, without);
    assert!(lookups_cached < lookups_uncached, "{lookups_cached} vs {lookups_uncached}");
}

#[test]
fn backups_are_other_gateways_with_learners() {
    let c = cluster(17, 3, ClusterOptions::default());
    for g in ["g1", "g2", "g3"] {
        let b = c.gateway_node(g).unwrap().backup().expect("backup assigned").clone();
        assert_ne!(b.group, g);
        let leader = c.leader_of(g).unwrap();
        let learners: Vec<String> = c.edge(&leader).unwrap().replica().raft.learners().map(|m| m.id.clone()).collect();
        for m in &b.members {
            assert!(learners.contains(&m.id));
            // The learner replica exists on the backup member.
            assert!(c.edge(&m.id).unwrap().replica_of(g).is_some(), "{} hosts no replica of {g}", m.id);
        }
    }
}

#[test]
fn partitioned_group_serves_stale_reads_and_rejects_writes() {
    let mut c = cluster(18, 3, ClusterOptions::default());
    let key = key_owned_by(&c, "g2");
    assert_eq!(call(&mut c, "c1", |cl, ctx| cl.put(ctx, Scope::Global, &key, b"before")).status, Status::Ok);
    c.sim.advance(ms(1000));

    c.isolate_group("g2");
    // Enough failed attempts to mark the group down.
    let mut statuses = Vec::new();
    for _ in 0..6 {
        statuses.push(call(&mut c, "c1", |cl, ctx| cl.put(ctx, Scope::Global, &key, b"during")).status);
    }
    assert!(c.gateway_node("g2").unwrap().group_down());
    assert_eq!(*statuses.last().unwrap(), Status::GroupUnavailable, "{statuses:?}");

    let r = call(&mut c, "c3", |cl, ctx| cl.get(ctx, Scope::Global, &key, ReadMode::Linearizable));
    assert_eq!((r.status, r.value.as_deref()), (Status::Ok, Some(&b"before"[..])));
    assert!(c.sim.node::<Gateway>(&c.gateway_of(&c.gateway_node("g2").unwrap().backup().unwrap().group).unwrap()).unwrap().stats().backup_reads > 0);

    c.heal();
    c.sim.advance(ms(5000));
    assert!(!c.gateway_node("g2").unwrap().group_down());
    assert_eq!(call(&mut c, "c1", |cl, ctx| cl.put(ctx, Scope::Global, &key, b"after")).status, Status::Ok);
    let r = call(&mut c, "c3", |cl, ctx| cl.get(ctx, Scope::Global, &key, ReadMode::Linearizable));
    assert_eq!(r.value.as_deref(), Some(&b"after"[..]));

    // Learners converge to the owner's state after the heal.
    c.sim.advance(ms(2000));
    let leader = c.leader_of("g2").unwrap();
    let want = c.edge(&leader).unwrap().replica().storage.scope_hash(Scope::Global);
    let backup = c.gateway_node("g2").unwrap().backup().unwrap().clone();
    for m in &backup.members {
        let got = c.edge(&m.id).unwrap().replica_of("g2").unwrap().storage.scope_hash(Scope::Global);
        assert_eq!(got, want, "learner {} diverged", m.id);
    }
}

#[test]
fn dead_gateway_makes_global_ops_fail_but_local_ops_work() {
    let mut c = cluster(19, 2, ClusterOptions::default());
    c.crash("gw-1");
    let r = call(&mut c, "c1", |cl, ctx| cl.put(ctx, Scope::Global, b"k", b"v"));
    assert_eq!(r.status, Status::GatewayUnavailable);
    let r = call(&mut c, "c1", |cl, ctx| cl.put(ctx, Scope::Local, b"k", b"v"));
    assert_eq!(r.status, Status::Ok);
    assert!(c.sim.node::<EdgeNode>("g1-n1").is_some());
}

#[test]
fn local_data_never_reaches_backup_learners() {
    let mut c = cluster(20, 2, ClusterOptions::default());
    assert_eq!(call(&mut c, "c1", |cl, ctx| cl.put(ctx, Scope::Local, b"private", b"x")).status, Status::Ok);
    let key = key_owned_by(&c, "g1");
    assert_eq!(call(&mut c, "c1", |cl, ctx| cl.put(ctx, Scope::Global, &key, b"shared")).status, Status::Ok);
    c.sim.advance(ms(1000));
    let backup = c.gateway_node("g1").unwrap().backup().unwrap().clone();
    for m in &backup.members {
        let r = c.edge(&m.id).unwrap().replica_of("g1").unwrap();
        assert_eq!(r.storage.read(Scope::Local, b"private"), None, "{} holds local data of g1", m.id);
        assert_eq!(r.storage.read(Scope::Global, &key), Some(&b"shared"[..]));
        assert_eq!(r.raft.last_index(), c.edge(&c.leader_of("g1").unwrap()).unwrap().replica().raft.last_index());
    }
}
