//! The protocol stack over real loopback sockets. Timing assertions are
//! loose; the simulator covers exact behavior.

use std::net::TcpListener;
use std::thread;
use std::time::{Duration, Instant};

use edgekv::edge::{EdgeConfig, EdgeNode};
use edgekv::gateway::{Gateway, GatewayConfig};
use edgekv::transport::tcp::{spawn, NodeHandle, TcpClient};
use edgekv::transport::Observation;
use edgekv::wire::{ClientGet, ClientPut, Member, Message, ReadMode, RequestId, Scope, Status};

fn listener() -> (TcpListener, String) {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let a = l.local_addr().unwrap().to_string();
    (l, a)
}

struct Group {
    nodes: Vec<NodeHandle>,
    addrs: Vec<String>,
}

fn start_group(name: &str, gateway: Option<String>, seed: u64) -> Group {
    let ls: Vec<(TcpListener, String)> = (0..3).map(|_| listener()).collect();
    let peers: Vec<Member> = ls.iter().map(|(_, a)| Member::new(a.clone(), a.clone())).collect();
    let addrs: Vec<String> = ls.iter().map(|(_, a)| a.clone()).collect();
    let nodes = ls
        .into_iter()
        .enumerate()
        .map(|(i, (l, a))| {
            let cfg = EdgeConfig::new(a.clone(), name, peers.clone(), gateway.clone());
            spawn(l, a, EdgeNode::new(cfg).unwrap(), seed + i as u64).unwrap()
        })
        .collect();
    Group { nodes, addrs }
}

fn leader_elected(g: &Group, within: Duration) -> bool {
    let deadline = Instant::now() + within;
    let mut seen = 0;
    while Instant::now() < deadline {
        seen += g.nodes.iter().flat_map(|n| n.observations()).filter(|(_, o)| matches!(o, Observation::BecameLeader { .. })).count();
        if seen > 0 {
            return true;
        }
        thread::sleep(Duration::from_millis(20));
    }
    false
}

/// Retries until the status is Ok; leadership may still be settling.
fn request_ok(endpoint: &str, msg: Message) -> Option<Vec<u8>> {
    let deadline = Instant::now() + Duration::from_secs(10);
    let mut c = TcpClient::connect(endpoint, &format!("cli-{}", std::process::id()), Duration::from_secs(2)).unwrap();
    while Instant::now() < deadline {
        if let Ok(env) = c.request(msg.clone(), Duration::from_secs(6)) {
            if let Message::ClientResponse(r) = env.message {
                if r.status == Status::Ok {
                    return r.value;
                }
            }
        }
        thread::sleep(Duration::from_millis(100));
    }
    panic!("request to {endpoint} never succeeded");
}

#[test]
fn group_elects_leader_and_serves_local_ops_over_tcp() {
    let g = start_group("g1", None, 10);
    assert!(leader_elected(&g, Duration::from_secs(5)), "no leader within 5 s");
    let rid = RequestId { client: 1, seq: 1 };
    request_ok(&g.addrs[0], ClientPut { scope: Scope::Local, key: b"k".to_vec(), value: b"v".to_vec(), request_id: rid }.into());
    // Linearizable read through a different member.
    let v = request_ok(&g.addrs[2], ClientGet { scope: Scope::Local, key: b"k".to_vec(), mode: ReadMode::Linearizable }.into());
    assert_eq!(v.as_deref(), Some(&b"v"[..]));
    for n in g.nodes {
        n.stop();
    }
}

#[test]
fn global_put_is_visible_from_another_group_over_tcp() {
    let (l1, gw1) = listener();
    let (l2, gw2) = listener();
    let g1 = start_group("g1", Some(gw1.clone()), 20);
    let g2 = start_group("g2", Some(gw2.clone()), 30);
    let members = |g: &Group| g.addrs.iter().map(|a| Member::new(a.clone(), a.clone())).collect::<Vec<_>>();
    let mut c1 = GatewayConfig::new(gw1.clone(), "g1", members(&g1), None);
    c1.address = gw1.clone();
    let mut c2 = GatewayConfig::new(gw2.clone(), "g2", members(&g2), Some(gw1.clone()));
    c2.address = gw2.clone();
    let h1 = spawn(l1, gw1, Gateway::new(c1).unwrap(), 1).unwrap();
    let h2 = spawn(l2, gw2, Gateway::new(c2).unwrap(), 2).unwrap();
    assert!(leader_elected(&g1, Duration::from_secs(5)) && leader_elected(&g2, Duration::from_secs(5)));
    // Overlay joins and stabilizes on its maintenance period.
    thread::sleep(Duration::from_secs(3));

    for i in 0..5u64 {
        let key = format!("gk{i}").into_bytes();
        let value = format!("gv{i}").into_bytes();
        let rid = RequestId { client: 2, seq: i + 1 };
        request_ok(&g1.addrs[0], ClientPut { scope: Scope::Global, key: key.clone(), value: value.clone(), request_id: rid }.into());
        let got = request_ok(&g2.addrs[1], ClientGet { scope: Scope::Global, key, mode: ReadMode::Linearizable }.into());
        assert_eq!(got, Some(value));
    }
    for n in g1.nodes.into_iter().chain(g2.nodes) {
        n.stop();
    }
    h1.stop();
    h2.stop();
}
