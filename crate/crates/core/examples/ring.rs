//! Identifiers on the hash ring: hashing names, arcs, finger targets.
//!
//!     cargo run --example ring

use edgekv::ring::{hash_id, RingInterval, RingSpace};

fn main() -> edgekv::Result<()> {
    let ring = RingSpace::default();
    let gateways = ["gw-1#0", "gw-2#0", "gw-3#0"];
    let mut ids: Vec<_> = gateways.iter().map(|g| (hash_id(g.as_bytes()).unwrap(), *g)).collect();
    ids.sort();
    for (id, name) in &ids {
        println!("{name:8} {}", id.to_hex());
    }

    // A key belongs to the first vnode at or after its hash, i.e. the
    // vnode whose (predecessor, self] arc contains it.
    for key in ["user:42", "cart:7", "session:x"] {
        let k = hash_id(key.as_bytes())?;
        let owner = (0..ids.len())
            .find(|&i| {
                let pred = ids[(i + ids.len() - 1) % ids.len()].0;
                ring.contains(RingInterval::open_closed(pred, ids[i].0), k)
            })
            .unwrap();
        println!("{key:10} {} -> {}", k.to_hex(), ids[owner].1);
    }

    // Finger i of node n points at the successor of n + 2^(i-1).
    let small = RingSpace::new(6)?;
    let n = small.id(8);
    let starts: Vec<u64> = (1..=6).map(|i| small.finger_start(n, i).unwrap().value()).collect();
    println!("finger starts of 8 on a 6-bit ring: {starts:?}");
    Ok(())
}
