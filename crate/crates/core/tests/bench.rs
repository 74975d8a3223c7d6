//! Benchmark harness checked against the simulator's own records.

use std::collections::BTreeMap;

use edgekv::bench::{self, BenchSetup, WorkloadSpec};
use edgekv::cluster::ClusterTopology;
use edgekv::transport::ms;
use edgekv::wire::{MessageKind, Scope};

fn small(global: f64) -> BenchSetup {
    BenchSetup::new(
        ClusterTopology::uniform(3, 3, 2),
        WorkloadSpec {
            record_count: 300,
            operation_count: 400,
            threads_per_client: 10,
            global_proportion: global,
            seed: 3,
            ..WorkloadSpec::default()
        },
    )
}

#[test]
fn reported_latency_matches_the_message_trace() {
    let mut setup = small(0.5);
    setup.options.trace = true;
    let run = bench::execute(&setup).unwrap();
    let trace = run.cluster.sim.trace();
    let mut sent = BTreeMap::new();
    let mut delivered = BTreeMap::new();
    for t in trace {
        if t.from.starts_with('c') && !t.from.contains('-') {
            sent.insert((t.from.clone(), t.id), t.sent_at);
        }
        if t.to.starts_with('c') && !t.to.contains('-') && t.kind == MessageKind::ClientResponse {
            delivered.insert((t.to.clone(), t.id), t.delivered_at.unwrap());
        }
    }
    let mut checked = 0;
    for (k, records) in run.records.iter().enumerate() {
        let name = format!("c{}", k + 1);
        for r in records {
            assert_eq!(sent[&(name.clone(), r.envelope)], r.sent_at);
            assert_eq!(delivered[&(name.clone(), r.envelope)], r.done_at);
            checked += 1;
        }
    }
    assert_eq!(checked, 3 * 400);
    let mean_ms = run.records.iter().flatten().map(|r| r.latency() as f64).sum::<f64>() / checked as f64 / 100.0;
    assert!((mean_ms - run.report.latency.all.mean_ms).abs() < 1e-9);
}

#[test]
fn local_only_workload_sends_no_global_traffic() {
    let mut setup = small(0.0);
    setup.options.trace = true;
    let run = bench::execute(&setup).unwrap();
    let report = &run.report;
    assert_eq!(report.errors, 0);
    assert_eq!(report.messages.gateway_forwards, 0);
    assert_eq!(report.messages.cache_misses + report.messages.cache_hits, 0);
    for kind in ["GlobalPut", "GlobalGet", "GlobalDelete", "GlobalResponse"] {
        assert!(!report.messages.by_kind.contains_key(kind), "{kind} sent: {:?}", report.messages.by_kind);
    }
    // Nothing a client caused in the run phase reaches a gateway. (The load
    // phase always writes the global keys.)
    let run_start = run.records.iter().flatten().map(|r| r.sent_at).min().unwrap();
    let client_causes: std::collections::BTreeSet<u64> = run
        .cluster
        .sim
        .trace()
        .iter()
        .filter(|t| t.sent_at >= run_start && t.from.starts_with('c') && !t.from.contains('-'))
        .map(|t| t.cause)
        .collect();
    assert!(client_causes.len() >= 3 * 400);
    let touching = run
        .cluster
        .sim
        .trace()
        .iter()
        .filter(|t| client_causes.contains(&t.cause) && (t.from.starts_with("gw-") || t.to.starts_with("gw-")))
        .count();
    assert_eq!(touching, 0);
    assert_eq!(report.latency.read_global.count + report.latency.update_global.count, 0);
}

#[test]
fn load_phase_populates_every_group() {
    let run = bench::execute(&small(0.5)).unwrap();
    let records = 300;
    // Each client fills its own group's local map, and the clients split
    // the global keys between them.
    assert_eq!(run.report.loaded, 3 * records + records);
    let mut global = 0;
    for g in run.cluster.group_ids() {
        let leader = run.cluster.leader_of(&g).unwrap();
        let store = &run.cluster.edge(&leader).unwrap().replica().storage;
        for i in 0..records {
            assert!(store.read(Scope::Local, &bench::key_name(i)).is_some(), "{g} lacks local key {i}");
            global += usize::from(store.read(Scope::Global, &bench::key_name(i)).is_some());
        }
    }
    assert_eq!(global, records, "each global key lives in exactly one group");
}

#[test]
fn closed_loop_issues_every_operation() {
    let report = bench::run(&small(0.25)).unwrap();
    assert_eq!(report.operations, 3 * 400);
    assert_eq!(report.throughput.per_client.len(), 3);
    assert!(!report.failed);
}

#[test]
fn rate_limited_run_issues_rate_times_duration() {
    let mut setup = small(0.5);
    setup.workload.clients = 1;
    setup.rate_duration = ms(10_000);
    let report = bench::rate_limited_run(&setup, 100.0).unwrap();
    assert_eq!(report.operations, 1000);
    assert_eq!(report.errors, 0);
    // An open loop well under capacity completes at the offered rate.
    assert!((report.throughput.mean - 100.0).abs() < 2.0, "{}", report.throughput.mean);
    assert!(bench::rate_limited_run(&setup, 0.0).is_err());
}

#[test]
fn same_seed_same_report() {
    let a = serde_json::to_string(&bench::run(&small(0.5)).unwrap()).unwrap();
    let b = serde_json::to_string(&bench::run(&small(0.5)).unwrap()).unwrap();
    assert_eq!(a, b);
    let mut other = small(0.5);
    other.workload.seed = 4;
    assert_ne!(a, serde_json::to_string(&bench::run(&other).unwrap()).unwrap());
}

#[test]
fn latency_log_has_a_row_per_operation() {
    let run = bench::execute(&small(0.5)).unwrap();
    let mut out = Vec::new();
    bench::write_latency_log(&run.records, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 400);
}
