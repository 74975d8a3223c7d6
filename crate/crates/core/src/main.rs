//! `edgekv`: run nodes and gateways, issue client operations, run benchmarks.
//!
//! Exit codes: 0 success, 1 key not found or a benchmark cell over the
//! error budget, 2 bad arguments or config, 3 listen address in use,
//! 4 unavailable or timed out.

use std::io::{self, IsTerminal};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use edgekv::bench::{BenchSpec, Scenario};
use edgekv::cluster::ClusterTopology;
use edgekv::config::{GatewayFile, NodeFile};
use edgekv::edge::EdgeNode;
use edgekv::gateway::Gateway;
use edgekv::transport::tcp::{self, NodeHandle, TcpClient};
use edgekv::transport::Process;
use edgekv::wire::{ClientDelete, ClientGet, ClientPut, Message, ReadMode, RequestId, Scope, Status};
use edgekv::Error;

const OK: u8 = 0;
const NOT_FOUND: u8 = 1;
const USAGE: u8 = 2;
const ADDR_IN_USE: u8 = 3;
const UNAVAILABLE: u8 = 4;

#[derive(Parser)]
#[command(name = "edgekv", version, about = "Two-tier edge key-value store")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an edge node until SIGTERM.
    Node {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a gateway until SIGTERM.
    Gateway {
        #[arg(long)]
        config: PathBuf,
    },
    /// One operation against an edge node.
    Client {
        #[command(subcommand)]
        op: ClientOp,
        /// Edge node to talk to; also read from EDGEKV_ENDPOINT.
        #[arg(long, env = "EDGEKV_ENDPOINT", global = true)]
        endpoint: Option<String>,
        #[arg(long, value_enum, default_value = "local", global = true)]
        scope: ScopeArg,
        /// Read mode for get: linearizable or serializable.
        #[arg(long, value_enum, default_value = "lin", global = true)]
        mode: ModeArg,
        /// How long to wait for the answer.
        #[arg(long, default_value_t = 6000, global = true)]
        timeout_ms: u64,
    },
    /// Load and run a workload (or sweep) on the simulator.
    Bench {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a self-contained scenario file on the simulator.
    Sim {
        #[arg(long)]
        scenario: PathBuf,
        /// Defaults to `out/<scenario name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ClientOp {
    /// Print the value of a key; exit 1 if it is absent.
    Get { key: String },
    /// Set a key.
    Put { key: String, value: String },
    /// Remove a key (absent keys are fine).
    Del { key: String },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Local,
    Global,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Lin,
    Ser,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { OK });
        }
    };
    // Simulated nodes would log every election and backup change.
    let default_level = match cli.command {
        Command::Bench { .. } | Command::Sim { .. } => "warn",
        _ => "info",
    };
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_ansi(io::stderr().is_terminal())
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| default_level.into()))
        .init();
    let code = match cli.command {
        Command::Node { config } => run_node(&config),
        Command::Gateway { config } => run_gateway(&config),
        Command::Client { op, endpoint, scope, mode, timeout_ms } => client(op, endpoint, scope, mode, timeout_ms),
        Command::Bench { spec, topology, out } => bench(&spec, &topology, &out),
        Command::Sim { scenario, out } => sim(&scenario, out),
    };
    ExitCode::from(code)
}

fn fail(code: u8, msg: impl std::fmt::Display) -> u8 {
    eprintln!("edgekv: {msg}");
    code
}

fn bind(addr: &str) -> Result<TcpListener, u8> {
    TcpListener::bind(addr).map_err(|e| match e.kind() {
        io::ErrorKind::AddrInUse => fail(ADDR_IN_USE, format!("{addr} is already in use")),
        _ => fail(USAGE, format!("cannot listen on {addr}: {e}")),
    })
}

/// Runs until SIGTERM or SIGINT, then lets the process flush and exits 0.
fn serve<P: Process + Send>(listen: &str, process: P) -> u8 {
    let listener = match bind(listen) {
        Ok(l) => l,
        Err(code) => return code,
    };
    let handle: NodeHandle = match tcp::spawn(listener, listen.to_string(), process, seed()) {
        Ok(h) => h,
        Err(e) => return fail(USAGE, e),
    };
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        if let Err(e) = signal_hook::flag::register(sig, handle.stop_flag()) {
            return fail(USAGE, format!("cannot install signal handler: {e}"));
        }
    }
    tracing::info!(%listen, "serving");
    handle.wait();
    tracing::info!("stopped");
    OK
}

fn seed() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos() as u64) ^ std::process::id() as u64
}

fn run_node(path: &Path) -> u8 {
    let file = match NodeFile::load(path) {
        Ok(f) => f,
        Err(e) => return fail(USAGE, e),
    };
    let node = match file.edge_config().and_then(EdgeNode::new) {
        Ok(n) => n,
        Err(e) => return fail(USAGE, e),
    };
    serve(&file.listen, node)
}

fn run_gateway(path: &Path) -> u8 {
    let file = match GatewayFile::load(path) {
        Ok(f) => f,
        Err(e) => return fail(USAGE, e),
    };
    let gw = match file.gateway_config().and_then(Gateway::new) {
        Ok(g) => g,
        Err(e) => return fail(USAGE, e),
    };
    serve(&file.listen, gw)
}

fn client(op: ClientOp, endpoint: Option<String>, scope: ScopeArg, mode: ModeArg, timeout_ms: u64) -> u8 {
    let Some(endpoint) = endpoint else {
        return fail(USAGE, "no endpoint: pass --endpoint or set EDGEKV_ENDPOINT");
    };
    let scope = match scope {
        ScopeArg::Local => Scope::Local,
        ScopeArg::Global => Scope::Global,
    };
    let mode = match mode {
        ModeArg::Lin => ReadMode::Linearizable,
        ModeArg::Ser => ReadMode::Serializable,
    };
    let id = seed();
    let request_id = RequestId { client: id, seq: 1 };
    let (msg, is_get): (Message, bool) = match op {
        ClientOp::Get { key } => (ClientGet { scope, key: key.into_bytes(), mode }.into(), true),
        ClientOp::Put { key, value } => (ClientPut { scope, key: key.into_bytes(), value: value.into_bytes(), request_id }.into(), false),
        ClientOp::Del { key } => (ClientDelete { scope, key: key.into_bytes(), request_id }.into(), false),
    };
    let timeout = Duration::from_millis(timeout_ms);
    let reply = TcpClient::connect(&endpoint, &format!("cli-{id:x}"), timeout).and_then(|mut c| c.request(msg, timeout));
    let env = match reply {
        Ok(env) => env,
        Err(Error::Io(e)) => return fail(UNAVAILABLE, format!("{endpoint}: {e}")),
        Err(e) => return fail(USAGE, e),
    };
    let Message::ClientResponse(r) = env.message else {
        return fail(UNAVAILABLE, format!("unexpected reply {:?}", env.message.kind()));
    };
    match r.status {
        Status::Ok if is_get => {
            println!("{}", String::from_utf8_lossy(r.value.as_deref().unwrap_or_default()));
            OK
        }
        Status::Ok => {
            println!("OK");
            OK
        }
        Status::NotFound => fail(NOT_FOUND, "not found"),
        Status::InvalidArgument => fail(USAGE, "invalid argument"),
        other => fail(UNAVAILABLE, format!("{other:?}")),
    }
}

/// Fails early if reports could not be written.
fn check_out_dir(out: &Path) -> Result<(), u8> {
    let probe = out.join(".edgekv-write-check");
    std::fs::create_dir_all(out)
        .and_then(|_| std::fs::write(&probe, b""))
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(|e| fail(USAGE, format!("{} is not writable: {e}", out.display())))
}

fn run_scenario(s: &Scenario, out: &Path) -> u8 {
    if let Err(code) = check_out_dir(out) {
        return code;
    }
    tracing::info!(scenario = %s.name, out = %out.display(), "running");
    let table = s.run();
    if let Err(e) = table.write(out) {
        return fail(USAGE, e);
    }
    for c in &table.cells {
        match (&c.report, &c.error) {
            (Some(r), _) => eprintln!(
                "{} = {} [{}]: {} ops, error rate {:.3}%, write mean {:.2} ms, {:.0} ops/s per client",
                table.parameter,
                c.value,
                c.profile,
                r.operations,
                100.0 * r.error_rate,
                r.latency.update.mean_ms,
                r.throughput.mean
            ),
            (None, e) => eprintln!("{} = {} [{}]: failed: {}", table.parameter, c.value, c.profile, e.as_deref().unwrap_or("?")),
        }
    }
    if table.all_ok() {
        OK
    } else {
        fail(NOT_FOUND, "at least one cell exceeded the 1% error budget")
    }
}

fn bench(spec: &Path, topology: &Path, out: &Path) -> u8 {
    let scenario = ClusterTopology::load(topology).and_then(|t| {
        let name = spec.file_stem().map_or("bench".into(), |s| s.to_string_lossy().into_owned());
        BenchSpec::load(spec)?.into_scenario(&name, t)
    });
    match scenario {
        Ok(s) => run_scenario(&s, out),
        Err(e) => fail(USAGE, e),
    }
}

fn sim(path: &Path, out: Option<PathBuf>) -> u8 {
    match Scenario::load(path) {
        Ok(s) => {
            let out = out.unwrap_or_else(|| Path::new("out").join(&s.name));
            run_scenario(&s, &out)
        }
        Err(e) => fail(USAGE, e),
    }
}
