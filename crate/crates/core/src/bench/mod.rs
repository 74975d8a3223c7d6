//! YCSB-style benchmark: load and run phases over a simulated cluster,
//! latency and throughput reports, parameter sweeps.
//!
//! ```no_run
//! use edgekv::bench::{run, BenchSetup, WorkloadSpec};
//! use edgekv::cluster::ClusterTopology;
//!
//! let setup = BenchSetup::new(ClusterTopology::uniform(3, 3, 1), WorkloadSpec { global_proportion: 0.5, ..Default::default() });
//! let report = run(&setup).unwrap();
//! println!("{:.1} ms mean write", report.latency.update.mean_ms);
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterOptions, ClusterTopology, ProfileSpec, SimCluster};
use crate::error::{Error, Result};
use crate::transport::{ms, ticks_to_ms, Tick, TICKS_PER_MS};
use crate::wire::Scope;

mod client;
mod workload;

pub use client::{BenchClient, OpRecord, Phase};
pub use workload::{key_name, next_op, value_for, Distribution, KeyChooser, Op, OpKind, WorkloadSpec};

/// Everything one benchmark run needs.
#[derive(Clone, Debug)]
pub struct BenchSetup {
    pub topology: ClusterTopology,
    pub workload: WorkloadSpec,
    pub options: ClusterOptions,
    /// Open-loop target rate per client; closed loop when `None`.
    pub request_rate: Option<f64>,
    /// How long an open-loop run issues operations.
    pub rate_duration: Tick,
    /// Simulated time budget for each phase.
    pub horizon: Tick,
}

impl BenchSetup {
    pub fn new(topology: ClusterTopology, workload: WorkloadSpec) -> Self {
        // Benchmarks never crash nodes, so there is nothing to recover.
        let options = ClusterOptions { durable: false, ..ClusterOptions::default() };
        BenchSetup { topology, workload, options, request_rate: None, rate_duration: ms(10_000), horizon: ms(3_600_000) }
    }

    pub fn with_profile(mut self, profile: ProfileSpec) -> Self {
        self.topology.profile = profile;
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LatencySummary {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl LatencySummary {
    pub fn from_ticks(mut samples: Vec<Tick>) -> Self {
        if samples.is_empty() {
            return LatencySummary::default();
        }
        samples.sort_unstable();
        let n = samples.len();
        let rank = |p: f64| ticks_to_ms(samples[((p * n as f64).ceil() as usize).clamp(1, n) - 1]);
        LatencySummary {
            count: n,
            mean_ms: ticks_to_ms(samples.iter().sum::<u64>()) / n as f64,
            p50_ms: rank(0.50),
            p95_ms: rank(0.95),
            p99_ms: rank(0.99),
            max_ms: ticks_to_ms(samples[n - 1]),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LatencyBreakdown {
    pub all: LatencySummary,
    pub read: LatencySummary,
    pub update: LatencySummary,
    pub read_local: LatencySummary,
    pub read_global: LatencySummary,
    pub update_local: LatencySummary,
    pub update_global: LatencySummary,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Throughput {
    /// Successful operations per second for each client.
    pub per_client: Vec<f64>,
    /// Mean of `per_client`.
    pub mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MessageCounters {
    /// Messages sent anywhere in the cluster during the run phase.
    pub total: u64,
    pub per_op: f64,
    pub by_kind: BTreeMap<String, u64>,
    /// Requests a gateway forwarded to another gateway.
    pub gateway_forwards: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BenchReport {
    pub profile: String,
    pub distribution: Distribution,
    pub global_proportion: f64,
    pub clients: usize,
    pub threads_per_client: usize,
    pub request_rate: Option<f64>,
    pub loaded: usize,
    pub operations: usize,
    pub errors: usize,
    pub error_rate: f64,
    /// Error rate above 1% or an aborted load.
    pub failed: bool,
    pub load_error: Option<String>,
    pub duration_ms: f64,
    pub latency: LatencyBreakdown,
    pub throughput: Throughput,
    pub messages: MessageCounters,
    pub statuses: BTreeMap<String, usize>,
}

/// A finished run: the report plus the raw records of every client.
pub struct BenchRun {
    pub report: BenchReport,
    pub records: Vec<Vec<OpRecord>>,
    pub cluster: SimCluster,
}

pub fn profile_label(p: &ProfileSpec) -> String {
    match p {
        ProfileSpec::Named(n) => n.clone(),
        ProfileSpec::Custom(_) => "custom".into(),
    }
}

/// Builds the cluster, loads it and runs the workload.
pub fn run(setup: &BenchSetup) -> Result<BenchReport> {
    execute(setup).map(|r| r.report)
}

/// Like [`run`] but keeps the cluster and per-operation records.
pub fn execute(setup: &BenchSetup) -> Result<BenchRun> {
    let spec = &setup.workload;
    spec.validate()?;
    let mut cluster = SimCluster::build(setup.topology.clone(), spec.seed, setup.options.clone())?;
    cluster.wait_ready(ms(120_000))?;

    let groups = cluster.group_ids();
    let names: Vec<String> = (1..=spec.clients).map(|k| format!("c{k}")).collect();
    for (i, name) in names.iter().enumerate() {
        // Client k joins group k mod G, spreading over that group's nodes.
        let group = &groups[i % groups.len()];
        let nodes = cluster.edge_nodes(group);
        let target = nodes[(i / groups.len()) % nodes.len()].clone();
        cluster.add_client(name, Box::new(BenchClient::new(i, target, spec.clone())?));
    }

    for n in &names {
        cluster.sim.invoke::<BenchClient, _>(n, |c, ctx| c.start_load(ctx));
    }
    wait_settled(&mut cluster, &names, setup.horizon)?;
    let load_error = names.iter().find_map(|n| client(&cluster, n).load_error().map(str::to_owned));
    let loaded = names.iter().map(|n| client(&cluster, n).loaded()).sum();

    let before = cluster.sim.sent_by_kind().clone();
    let gw_before = gateway_totals(&cluster);
    let start = cluster.sim.now();
    if load_error.is_none() {
        for n in &names {
            match setup.request_rate {
                Some(rate) => cluster.sim.invoke::<BenchClient, _>(n, |c, ctx| c.start_open_loop(ctx, rate, setup.rate_duration)),
                None => cluster.sim.invoke::<BenchClient, _>(n, |c, ctx| c.start_run(ctx)),
            };
        }
        wait_settled(&mut cluster, &names, setup.horizon)?;
    }
    let end = cluster.sim.now();

    let records: Vec<Vec<OpRecord>> = names.iter().map(|n| client(&cluster, n).records().to_vec()).collect();
    let mut by_kind = BTreeMap::new();
    let mut total = 0;
    for (k, v) in cluster.sim.sent_by_kind() {
        let d = v - before.get(k).copied().unwrap_or(0);
        if d > 0 {
            by_kind.insert(k.as_str().to_string(), d);
            total += d;
        }
    }
    let gw_after = gateway_totals(&cluster);
    let messages = MessageCounters {
        total,
        per_op: 0.0,
        by_kind,
        gateway_forwards: gw_after.0 - gw_before.0,
        cache_hits: gw_after.1 - gw_before.1,
        cache_misses: gw_after.2 - gw_before.2,
    };
    let report = summarize(setup, &records, messages, loaded, load_error, end - start);
    Ok(BenchRun { report, records, cluster })
}

fn client<'a>(c: &'a SimCluster, name: &str) -> &'a BenchClient {
    c.sim.node::<BenchClient>(name).expect("bench client")
}

fn wait_settled(c: &mut SimCluster, names: &[String], horizon: Tick) -> Result<()> {
    c.sim.run_until_done(horizon, |s| names.iter().all(|n| s.node::<BenchClient>(n).is_some_and(BenchClient::settled)))?;
    Ok(())
}

fn gateway_totals(c: &SimCluster) -> (u64, u64, u64) {
    c.group_ids().iter().filter_map(|g| c.gateway_node(g)).fold((0, 0, 0), |acc, gw| {
        let s = gw.stats();
        (acc.0 + s.forwarded, acc.1 + s.cache_hits, acc.2 + s.cache_misses)
    })
}

fn summarize(
    setup: &BenchSetup,
    records: &[Vec<OpRecord>],
    mut messages: MessageCounters,
    loaded: usize,
    load_error: Option<String>,
    elapsed: Tick,
) -> BenchReport {
    let spec = &setup.workload;
    let all: Vec<&OpRecord> = records.iter().flatten().collect();
    let ok: Vec<&OpRecord> = all.iter().copied().filter(|r| r.status.is_success()).collect();
    let pick = |kind: Option<OpKind>, scope: Option<Scope>| {
        LatencySummary::from_ticks(
            ok.iter()
                .filter(|r| kind.is_none_or(|k| r.kind == k) && scope.is_none_or(|s| r.scope == s))
                .map(|r| r.latency())
                .collect(),
        )
    };
    let latency = LatencyBreakdown {
        all: pick(None, None),
        read: pick(Some(OpKind::Read), None),
        update: pick(Some(OpKind::Update), None),
        read_local: pick(Some(OpKind::Read), Some(Scope::Local)),
        read_global: pick(Some(OpKind::Read), Some(Scope::Global)),
        update_local: pick(Some(OpKind::Update), Some(Scope::Local)),
        update_global: pick(Some(OpKind::Update), Some(Scope::Global)),
    };
    let per_client: Vec<f64> = records
        .iter()
        .map(|rs| {
            let done = rs.iter().filter(|r| r.status.is_success()).count();
            let first = rs.iter().map(|r| r.sent_at).min();
            let last = rs.iter().map(|r| r.done_at).max();
            match (first, last) {
                (Some(a), Some(b)) if b > a => done as f64 / (ticks_to_ms(b - a) / 1000.0),
                _ => 0.0,
            }
        })
        .collect();
    let mean = if per_client.is_empty() { 0.0 } else { per_client.iter().sum::<f64>() / per_client.len() as f64 };
    let errors = all.len() - ok.len();
    let error_rate = if all.is_empty() { 0.0 } else { errors as f64 / all.len() as f64 };
    let mut statuses = BTreeMap::new();
    for r in &all {
        *statuses.entry(format!("{:?}", r.status)).or_insert(0) += 1;
    }
    messages.per_op = if all.is_empty() { 0.0 } else { messages.total as f64 / all.len() as f64 };
    BenchReport {
        profile: profile_label(&setup.topology.profile),
        distribution: spec.distribution,
        global_proportion: spec.global_proportion,
        clients: spec.clients,
        threads_per_client: spec.threads_per_client,
        request_rate: setup.request_rate,
        loaded,
        operations: all.len(),
        errors,
        error_rate,
        failed: error_rate > 0.01 || load_error.is_some(),
        load_error,
        duration_ms: ticks_to_ms(elapsed),
        latency,
        throughput: Throughput { per_client, mean },
        messages,
        statuses,
    }
}

/// Open-loop run at `rate` operations per second per client.
pub fn rate_limited_run(setup: &BenchSetup, rate: f64) -> Result<BenchReport> {
    if rate.is_nan() || rate <= 0.0 {
        return Err(Error::Config(format!("request rate must be positive, got {rate}")));
    }
    let mut s = setup.clone();
    s.request_rate = Some(rate);
    run(&s)
}

/// The parameter a sweep varies, with its values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "parameter", content = "values", rename_all = "camelCase")]
pub enum Sweep {
    GlobalProportion(Vec<f64>),
    /// Number of client nodes; they attach to groups round-robin.
    Clients(Vec<usize>),
    /// Open-loop rate per client.
    RequestRate(Vec<f64>),
    Distribution(Vec<Distribution>),
}

impl Sweep {
    pub fn parameter(&self) -> &'static str {
        match self {
            Sweep::GlobalProportion(_) => "globalProportion",
            Sweep::Clients(_) => "clients",
            Sweep::RequestRate(_) => "requestRate",
            Sweep::Distribution(_) => "distribution",
        }
    }

    fn cells(&self, base: &BenchSetup) -> Vec<(String, BenchSetup)> {
        let with = |f: &dyn Fn(&mut BenchSetup)| {
            let mut s = base.clone();
            f(&mut s);
            s
        };
        match self {
            Sweep::GlobalProportion(v) => v.iter().map(|&x| (fmt_num(x), with(&|s| s.workload.global_proportion = x))).collect(),
            Sweep::Clients(v) => v.iter().map(|&x| (x.to_string(), with(&|s| s.workload.clients = x))).collect(),
            Sweep::RequestRate(v) => v.iter().map(|&x| (fmt_num(x), with(&|s| s.request_rate = Some(x)))).collect(),
            Sweep::Distribution(v) => v.iter().map(|&x| (x.as_str().to_string(), with(&|s| s.workload.distribution = x))).collect(),
        }
    }
}

fn fmt_num(x: f64) -> String {
    format!("{x}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepCell {
    pub value: String,
    pub profile: String,
    pub report: Option<BenchReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepTable {
    pub parameter: String,
    pub cells: Vec<SweepCell>,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct CsvRow<'a> {
    parameter: &'a str,
    value: &'a str,
    profile: &'a str,
    ok: bool,
    operations: usize,
    errors: usize,
    error_rate: f64,
    read_mean_ms: f64,
    update_mean_ms: f64,
    read_local_mean_ms: f64,
    read_global_mean_ms: f64,
    update_local_mean_ms: f64,
    update_global_mean_ms: f64,
    p50_ms: f64,
    p95_ms: f64,
    p99_ms: f64,
    throughput_ops_s: f64,
    messages: u64,
    messages_per_op: f64,
    error: &'a str,
}

impl SweepTable {
    /// Every cell passed the 1% error-rate bar.
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(|c| c.report.as_ref().is_some_and(|r| !r.failed))
    }

    pub fn cell(&self, value: &str, profile: &str) -> Option<&BenchReport> {
        self.cells.iter().find(|c| c.value == value && c.profile == profile).and_then(|c| c.report.as_ref())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let empty = BenchReport::default();
        for c in &self.cells {
            let r = c.report.as_ref().unwrap_or(&empty);
            w.serialize(CsvRow {
                parameter: &self.parameter,
                value: &c.value,
                profile: &c.profile,
                ok: c.report.as_ref().is_some_and(|r| !r.failed),
                operations: r.operations,
                errors: r.errors,
                error_rate: r.error_rate,
                read_mean_ms: r.latency.read.mean_ms,
                update_mean_ms: r.latency.update.mean_ms,
                read_local_mean_ms: r.latency.read_local.mean_ms,
                read_global_mean_ms: r.latency.read_global.mean_ms,
                update_local_mean_ms: r.latency.update_local.mean_ms,
                update_global_mean_ms: r.latency.update_global.mean_ms,
                p50_ms: r.latency.all.p50_ms,
                p95_ms: r.latency.all.p95_ms,
                p99_ms: r.latency.all.p99_ms,
                throughput_ops_s: r.throughput.mean,
                messages: r.messages.total,
                messages_per_op: r.messages.per_op,
                error: c.error.as_deref().or(r.load_error.as_deref()).unwrap_or(""),
            })
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// One series per (profile, metric) with `[x, y]` points, x being the
    /// swept value or its position for categorical sweeps.
    pub fn plot_data(&self) -> serde_json::Value {
        let mut profiles: Vec<&str> = self.cells.iter().map(|c| c.profile.as_str()).collect();
        profiles.dedup();
        type Metric = (&'static str, fn(&BenchReport) -> f64);
        let metrics: [Metric; 4] = [
            ("updateMeanMs", |r| r.latency.update.mean_ms),
            ("readMeanMs", |r| r.latency.read.mean_ms),
            ("throughputOpsS", |r| r.throughput.mean),
            ("messagesPerOp", |r| r.messages.per_op),
        ];
        let mut values: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !values.contains(&c.value.as_str()) {
                values.push(&c.value);
            }
        }
        let x_of = |v: &str| v.parse::<f64>().unwrap_or_else(|_| values.iter().position(|x| *x == v).unwrap_or(0) as f64);
        let mut series = Vec::new();
        for p in &profiles {
            for (name, f) in &metrics {
                let points: Vec<serde_json::Value> = self
                    .cells
                    .iter()
                    .filter(|c| c.profile == *p)
                    .filter_map(|c| c.report.as_ref().map(|r| serde_json::json!([x_of(&c.value), f(r)])))
                    .collect();
                series.push(serde_json::json!({ "profile": p, "metric": name, "points": points }));
            }
        }
        serde_json::json!({ "parameter": self.parameter, "categories": values, "series": series })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let io = |e: std::io::Error| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display())));
        std::fs::create_dir_all(dir).map_err(io)?;
        std::fs::write(dir.join("sweep.csv"), self.to_csv()?).map_err(io)?;
        let summary = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(dir.join("sweep.json"), summary).map_err(io)?;
        let plot = serde_json::to_string_pretty(&self.plot_data()).expect("serializable");
        std::fs::write(dir.join("plot.json"), plot).map_err(io)?;
        Ok(())
    }
}

/// Runs every (value, profile) cell. A failing cell is recorded and the
/// sweep carries on.
pub fn sweep(base: &BenchSetup, axis: &Sweep, profiles: &[ProfileSpec]) -> SweepTable {
    let mut cells = Vec::new();
    for (value, setup) in axis.cells(base) {
        for p in profiles {
            let s = setup.clone().with_profile(p.clone());
            let (report, error) = match run(&s) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            cells.push(SweepCell { value: value.clone(), profile: profile_label(p), report, error });
        }
    }
    SweepTable { parameter: axis.parameter().to_string(), cells }
}

/// Per-operation latency log.
pub fn write_latency_log(records: &[Vec<OpRecord>], out: &mut dyn Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["client", "session", "kind", "scope", "key", "sentMs", "latencyMs", "status"]).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    for (c, rs) in records.iter().enumerate() {
        for r in rs {
            let kind = match r.kind {
                OpKind::Read => "read",
                OpKind::Update => "update",
            };
            let scope = match r.scope {
                Scope::Local => "local",
                Scope::Global => "global",
            };
            w.write_record([
                (c + 1).to_string(),
                r.session.to_string(),
                kind.into(),
                scope.into(),
                key_name(r.key).iter().map(|&b| b as char).collect(),
                format!("{:.2}", ticks_to_ms(r.sent_at)),
                format!("{:.2}", ticks_to_ms(r.latency())),
                format!("{:?}", r.status),
            ])
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        }
    }
    w.flush().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(())
}

/// A self-contained simulation scenario: topology, workload, and
/// optionally a sweep across profiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub topology: ClusterTopology,
    #[serde(default)]
    pub workload: WorkloadSpec,
    /// Profiles to compare; defaults to the topology's own.
    #[serde(default)]
    pub profiles: Vec<ProfileSpec>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub request_rate: Option<f64>,
    #[serde(default = "default_rate_duration_ms")]
    pub rate_duration_ms: u64,
    #[serde(default = "default_cache")]
    pub cache_capacity: usize,
}

fn default_rate_duration_ms() -> u64 {
    10_000
}

fn default_cache() -> usize {
    1024
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let s: Scenario = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        self.workload.validate()?;
        for p in &self.profiles {
            p.resolve()?;
        }
        if self.topology.transport != crate::cluster::TransportKind::Sim {
            return Err(Error::Config("scenarios run on the sim transport only".into()));
        }
        Ok(())
    }

    pub fn setup(&self) -> BenchSetup {
        let mut s = BenchSetup::new(self.topology.clone(), self.workload.clone());
        s.options.cache_capacity = self.cache_capacity;
        s.request_rate = self.request_rate;
        s.rate_duration = self.rate_duration_ms * TICKS_PER_MS;
        s
    }

    pub fn profiles(&self) -> Vec<ProfileSpec> {
        if self.profiles.is_empty() {
            vec![self.topology.profile.clone()]
        } else {
            self.profiles.clone()
        }
    }

    /// Runs the sweep, or a single cell per profile when there is none.
    pub fn run(&self) -> SweepTable {
        let axis = self.sweep.clone().unwrap_or(Sweep::GlobalProportion(vec![self.workload.global_proportion]));
        sweep(&self.setup(), &axis, &self.profiles())
    }
}

/// A benchmark spec file: either a bare workload or a workload with sweep
/// settings. The topology comes from its own file.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum BenchSpec {
    Workload(WorkloadSpec),
    Plan(BenchPlan),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct BenchPlan {
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub profiles: Vec<ProfileSpec>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub request_rate: Option<f64>,
    #[serde(default = "default_rate_duration_ms")]
    pub rate_duration_ms: u64,
    #[serde(default = "default_cache")]
    pub cache_capacity: usize,
}

impl BenchSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|_| {
            // untagged errors say nothing useful; report the richer shape's
            let detail = serde_json::from_str::<BenchPlan>(&text).err().map(|e| e.to_string()).unwrap_or_default();
            Error::Config(format!("{}: not a workload or bench plan: {detail}", path.display()))
        })
    }

    pub fn into_scenario(self, name: &str, topology: ClusterTopology) -> Result<Scenario> {
        let plan = match self {
            BenchSpec::Workload(workload) => BenchPlan {
                workload,
                profiles: Vec::new(),
                sweep: None,
                request_rate: None,
                rate_duration_ms: default_rate_duration_ms(),
                cache_capacity: default_cache(),
            },
            BenchSpec::Plan(p) => p,
        };
        let s = Scenario {
            name: name.to_string(),
            topology,
            workload: plan.workload,
            profiles: plan.profiles,
            sweep: plan.sweep,
            request_rate: plan.request_rate,
            rate_duration_ms: plan.rate_duration_ms,
            cache_capacity: plan.cache_capacity,
        };
        s.validate()?;
        Ok(s)
    }
}
