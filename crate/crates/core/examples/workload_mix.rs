//! The three request distributions, sampled without any store attached:
//! how often each decile of the key space is hit.
//!
//!     cargo run --example workload_mix

use edgekv::bench::{next_op, Distribution, OpKind, WorkloadSpec};
use edgekv::wire::Scope;

fn main() -> edgekv::Result<()> {
    let draws = 100_000;
    for distribution in [Distribution::Uniform, Distribution::Hotspot, Distribution::Latest] {
        let spec = WorkloadSpec { record_count: 1000, distribution, global_proportion: 0.25, ..WorkloadSpec::default() };
        spec.validate()?;
        let chooser = spec.chooser()?;
        let mut rng = spec.session_rng(0, 0);
        let mut deciles = [0usize; 10];
        let (mut reads, mut global) = (0, 0);
        for _ in 0..draws {
            let op = next_op(&spec, &chooser, &mut rng).unwrap();
            deciles[op.key * 10 / spec.record_count] += 1;
            reads += usize::from(op.kind == OpKind::Read);
            global += usize::from(op.scope == Scope::Global);
        }
        let pct: Vec<String> = deciles.iter().map(|&d| format!("{:4.1}", 100.0 * d as f64 / draws as f64)).collect();
        println!(
            "{:8} deciles % [{}]  reads {:.1}%  global {:.1}%",
            distribution.as_str(),
            pct.join(" "),
            100.0 * reads as f64 / draws as f64,
            100.0 * global as f64 / draws as f64
        );
    }
    Ok(())
}
