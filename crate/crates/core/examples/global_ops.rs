//! Global keys across three edge groups. Each key is stored only by the
//! group whose gateway owns its hash; any client can reach it.
//!
//!     cargo run --example global_ops

use edgekv::client::ScriptClient;
use edgekv::cluster::{ClusterOptions, ClusterTopology, SimCluster};
use edgekv::transport::{ms, ticks_to_ms};
use edgekv::wire::{ReadMode, Scope};

fn main() -> edgekv::Result<()> {
    let mut c = SimCluster::build(ClusterTopology::uniform(3, 3, 2), 3, ClusterOptions::default())?;
    c.wait_ready(ms(60_000))?;
    for g in 1..=3 {
        c.add_client(&format!("c{g}"), Box::new(ScriptClient::new(g, format!("g{g}-n1"))));
    }

    for key in ["config/feature-flags", "user/1001", "user/1002", "model/v3"] {
        let owner = c.owner_group(key.as_bytes()).unwrap();
        let t = c.sim.now();
        let r = c.call("c1", |cl, ctx| cl.put(ctx, Scope::Global, key.as_bytes(), b"v1"))?;
        let put_ms = ticks_to_ms(c.sim.now() - t);
        let t = c.sim.now();
        let got = c.call("c3", |cl, ctx| cl.get(ctx, Scope::Global, key.as_bytes(), ReadMode::Linearizable))?;
        let holders: Vec<String> = c
            .group_ids()
            .into_iter()
            .filter(|g| c.edge(&c.leader_of(g).unwrap()).unwrap().replica().storage.read(Scope::Global, key.as_bytes()).is_some())
            .collect();
        println!(
            "{key:22} owner {owner}: put {:?} from g1 in {put_ms:.2} ms, get {:?} from g3 in {:.2} ms, stored in {holders:?}",
            r.status,
            got.status,
            ticks_to_ms(c.sim.now() - t)
        );
    }

    // The same key under the local scope is a different value.
    c.call("c2", |cl, ctx| cl.put(ctx, Scope::Local, b"user/1001", b"local copy"))?;
    let g = c.call("c2", |cl, ctx| cl.get(ctx, Scope::Global, b"user/1001", ReadMode::Linearizable))?;
    println!("global user/1001 is still {:?}", String::from_utf8_lossy(g.value.as_deref().unwrap_or_default()));

    for g in c.group_ids() {
        let s = c.gateway_node(&g).unwrap().stats();
        println!("gateway of {g}: {} requests, {} forwarded, cache {} hits / {} misses", s.requests, s.forwarded, s.cache_hits, s.cache_misses);
    }
    Ok(())
}
