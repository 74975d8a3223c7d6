//! A Chord overlay of gateways with virtual nodes, in the simulator.
//! Looks up a handful of keys and prints where they land and how many
//! hops it took.
//!
//!     cargo run --example overlay_lookup

use edgekv::chord::{ChordConfig, OverlayHost, OverlayPeer};
use edgekv::ring::hash_id;
use edgekv::transport::sim::{NodeInfo, Sim};
use edgekv::transport::{ms, ticks_to_ms, Role, TopologyProfile};

fn main() -> edgekv::Result<()> {
    let cfg = ChordConfig::default();
    let (hosts, vnodes) = (8, 4);
    let mut sim = Sim::new(1, TopologyProfile::EDGE);
    for i in 1..=hosts {
        let name = format!("gw-{i}");
        let boot = (i > 1).then(|| "gw-1".to_string());
        let host = OverlayHost::new(&name, &name, vnodes, cfg, boot)?;
        sim.add_node(&name, NodeInfo::new(Role::Gateway, None), Box::new(OverlayPeer::new(host)));
        sim.advance(cfg.join_stagger * vnodes as u64 + ms(50));
    }
    // fix_fingers refreshes one finger per period; give it all 64.
    sim.advance(cfg.stabilize * 70);
    println!("{} vnodes after {:.0} ms simulated", hosts * vnodes, ticks_to_ms(sim.now()));

    for (w, key) in ["alice", "bob", "carol", "dave", "erin"].iter().enumerate() {
        let id = hash_id(key.as_bytes())?;
        let from = format!("gw-{}", w % hosts + 1);
        sim.invoke::<OverlayPeer, _>(&from, |p, ctx| p.locate(ctx, id, w as u64));
        sim.run_until_done(ms(10_000), |s| s.node::<OverlayPeer>(&from).unwrap().located(w as u64).is_some())?;
        let (owner, hops) = sim.node::<OverlayPeer>(&from).unwrap().located(w as u64).unwrap();
        println!("{key:6} {} asked at {from}: owner {} ({}), {hops} hops", id.to_hex(), owner.id.to_hex(), owner.address);
    }
    println!("messages sent: {}", sim.total_sent());
    Ok(())
}
