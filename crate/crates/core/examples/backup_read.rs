//! A group cut off from the network. Its gateway's backup group holds a
//! learner copy of its global keys, so reads keep working while writes
//! are refused until the group comes back.
//!
//!     cargo run --example backup_read

use edgekv::client::ScriptClient;
use edgekv::cluster::{ClusterOptions, ClusterTopology, SimCluster};
use edgekv::transport::{ms, ticks_to_ms};
use edgekv::wire::{ReadMode, Scope};

fn main() -> edgekv::Result<()> {
    let mut c = SimCluster::build(ClusterTopology::uniform(3, 3, 1), 18, ClusterOptions::default())?;
    c.wait_ready(ms(60_000))?;
    c.add_client("c1", Box::new(ScriptClient::new(1, "g1-n1")));
    c.add_client("c3", Box::new(ScriptClient::new(3, "g3-n1")));

    let key = (0..).map(|i| format!("item-{i}")).find(|k| c.owner_group(k.as_bytes()).as_deref() == Some("g2")).unwrap();
    c.call("c1", |cl, ctx| cl.put(ctx, Scope::Global, key.as_bytes(), b"before"))?;
    c.sim.advance(ms(1000));
    let backup = c.gateway_node("g2").unwrap().backup().cloned().unwrap();
    println!("{key} lives in g2; g2's backup is {} ({} learners)", backup.group, backup.members.len());

    c.isolate_group("g2");
    println!("g2 isolated");
    for attempt in 1..=4 {
        let t = c.sim.now();
        let r = c.call("c1", |cl, ctx| cl.put(ctx, Scope::Global, key.as_bytes(), b"during"))?;
        println!("  write {attempt}: {:?} after {:.0} ms", r.status, ticks_to_ms(c.sim.now() - t));
    }
    let t = c.sim.now();
    let r = c.call("c3", |cl, ctx| cl.get(ctx, Scope::Global, key.as_bytes(), ReadMode::Linearizable))?;
    println!(
        "  read: {:?} {:?} after {:.0} ms (g2 marked down: {})",
        r.status,
        String::from_utf8_lossy(r.value.as_deref().unwrap_or_default()),
        ticks_to_ms(c.sim.now() - t),
        c.gateway_node("g2").unwrap().group_down()
    );

    c.heal();
    c.sim.advance(ms(5000));
    let r = c.call("c1", |cl, ctx| cl.put(ctx, Scope::Global, key.as_bytes(), b"after"))?;
    println!("healed: write {:?}, g2 down: {}", r.status, c.gateway_node("g2").unwrap().group_down());
    Ok(())
}
