//! A small global-proportion sweep on the simulated edge and cloud
//! profiles, printed as a table. The full-size runs live in scenarios/.
//!
//!     cargo run --release --example bench_sweep

use edgekv::bench::{self, BenchSetup, Sweep, WorkloadSpec};
use edgekv::cluster::{ClusterTopology, ProfileSpec};

fn main() {
    let setup = BenchSetup::new(
        ClusterTopology::uniform(3, 3, 2),
        WorkloadSpec { record_count: 1000, operation_count: 1000, threads_per_client: 20, ..WorkloadSpec::default() },
    );
    let axis = Sweep::GlobalProportion(vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    let profiles = [ProfileSpec::Named("edge".into()), ProfileSpec::Named("cloud".into())];
    let table = bench::sweep(&setup, &axis, &profiles);
    println!("{:>8} {:>7} {:>10} {:>10} {:>10} {:>12} {:>7}", "global", "profile", "write ms", "read ms", "p99 ms", "ops/s/client", "errors");
    for c in &table.cells {
        match &c.report {
            Some(r) => println!(
                "{:>8} {:>7} {:>10.2} {:>10.2} {:>10.2} {:>12.0} {:>7}",
                c.value, c.profile, r.latency.update.mean_ms, r.latency.read.mean_ms, r.latency.all.p99_ms, r.throughput.mean, r.errors
            ),
            None => println!("{:>8} {:>7} failed: {}", c.value, c.profile, c.error.as_deref().unwrap_or("?")),
        }
    }
}
