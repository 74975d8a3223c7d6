//! One Raft-replicated edge group: local writes, linearizable and
//! serializable reads, and a leader crash.
//!
//!     cargo run --example edge_group

use edgekv::client::ScriptClient;
use edgekv::cluster::{ClusterOptions, ClusterTopology, SimCluster};
use edgekv::transport::{ms, ticks_to_ms};
use edgekv::wire::{ReadMode, Scope};

fn main() -> edgekv::Result<()> {
    let mut c = SimCluster::build(ClusterTopology::uniform(1, 3, 1), 7, ClusterOptions::default())?;
    let took = c.wait_ready(ms(30_000))?;
    let leader = c.leader_of("g1").unwrap();
    println!("leader {leader} elected after {:.1} ms", ticks_to_ms(took));

    // The client talks to a follower; it forwards to the leader.
    let follower = c.edge_nodes("g1").into_iter().find(|n| *n != leader).unwrap();
    c.add_client("c1", Box::new(ScriptClient::new(1, follower.clone())));
    let t = c.sim.now();
    let r = c.call("c1", |cl, ctx| cl.put(ctx, Scope::Local, b"temp", b"21.5"))?;
    println!("put via {follower}: {:?} in {:.2} ms", r.status, ticks_to_ms(c.sim.now() - t));
    for mode in [ReadMode::Linearizable, ReadMode::Serializable] {
        let t = c.sim.now();
        let r = c.call("c1", |cl, ctx| cl.get(ctx, Scope::Local, b"temp", mode))?;
        let v = String::from_utf8_lossy(r.value.as_deref().unwrap_or_default()).into_owned();
        println!("{mode:?} get: {v} in {:.2} ms", ticks_to_ms(c.sim.now() - t));
    }

    c.crash(&leader);
    let survivor = c.edge_nodes("g1").into_iter().find(|n| *n != leader).unwrap();
    c.sim.invoke::<ScriptClient, _>("c1", |cl, _| cl.set_target(survivor));
    // Writes in flight during the election time out; a client retries
    // with the same request id so the write applies at most once.
    let rid = c.sim.invoke::<ScriptClient, _>("c1", |cl, _| cl.next_request_id()).unwrap();
    let mut attempts = Vec::new();
    loop {
        let r = c.call("c1", |cl, ctx| cl.put_with(ctx, Scope::Local, b"temp", b"22.0", rid))?;
        attempts.push(r.status);
        if r.status.is_success() || !r.status.retryable() {
            break;
        }
    }
    println!("after crashing {leader}: put attempts {attempts:?}, new leader {}", c.leader_of("g1").unwrap_or_default());

    c.restart(&leader)?;
    c.sim.advance(ms(2000));
    let v = c.edge(&leader).unwrap().replica().storage.read(Scope::Local, b"temp").map(|v| String::from_utf8_lossy(v).into_owned());
    println!("{leader} restarted and caught up: temp = {}", v.unwrap_or_default());
    Ok(())
}
