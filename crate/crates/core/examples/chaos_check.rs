//! Crash and partition a three-node group under concurrent clients, then
//! check the recorded history for linearizability.
//!
//!     cargo run --release --example chaos_check -- [runs] [ops]

use edgekv::chaos::run_group_chaos;

fn main() -> edgekv::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("numeric argument"));
    let runs = args.next().unwrap_or(10);
    let ops = args.next().unwrap_or(300);
    let mut clean = 0;
    for seed in 0..runs as u64 {
        let o = run_group_chaos(seed, ops)?;
        println!(
            "seed {seed:3}: {} ops done, {} unknown, {} violations, dual leaders in {:?}, replicas agree {}, {} faults injected",
            o.completed,
            o.unknown,
            o.violations.len(),
            o.dual_leader_terms,
            o.hashes_agree(),
            o.faults.len()
        );
        clean += usize::from(o.clean());
    }
    println!("{clean}/{runs} runs clean");
    Ok(())
}
