//! Two edge groups and their gateways on real loopback sockets, all in
//! this process. Same node code as the simulator, different transport.
//!
//!     cargo run --example tcp_loopback

use std::net::TcpListener;
use std::thread;
use std::time::{Duration, Instant};

use edgekv::edge::{EdgeConfig, EdgeNode};
use edgekv::gateway::{Gateway, GatewayConfig};
use edgekv::transport::tcp::{spawn, NodeHandle, TcpClient};
use edgekv::wire::{ClientGet, ClientPut, Member, Message, ReadMode, RequestId, Scope, Status};

fn bind() -> edgekv::Result<(TcpListener, String)> {
    let l = TcpListener::bind("127.0.0.1:0")?;
    let addr = l.local_addr()?.to_string();
    Ok((l, addr))
}

/// Three edge nodes of `group`; returns their handles and addresses.
fn start_group(group: &str, gateway: &str, seed: u64) -> edgekv::Result<(Vec<NodeHandle>, Vec<Member>)> {
    let sockets = (0..3).map(|_| bind()).collect::<edgekv::Result<Vec<_>>>()?;
    let members: Vec<Member> = sockets.iter().map(|(_, a)| Member::new(a.clone(), a.clone())).collect();
    let mut handles = Vec::new();
    for (i, (l, addr)) in sockets.into_iter().enumerate() {
        let cfg = EdgeConfig::new(addr.clone(), group, members.clone(), Some(gateway.to_string()));
        handles.push(spawn(l, addr, EdgeNode::new(cfg)?, seed + i as u64)?);
    }
    Ok((handles, members))
}

/// Retries while leadership and the overlay settle.
fn request(endpoint: &str, msg: Message) -> edgekv::Result<Option<Vec<u8>>> {
    let mut client = TcpClient::connect(endpoint, "example-client", Duration::from_secs(2))?;
    let deadline = Instant::now() + Duration::from_secs(15);
    loop {
        if let Ok(env) = client.request(msg.clone(), Duration::from_secs(6)) {
            if let Message::ClientResponse(r) = env.message {
                if r.status == Status::Ok || Instant::now() > deadline {
                    return Ok(r.value);
                }
            }
        }
        thread::sleep(Duration::from_millis(100));
    }
}

fn main() -> edgekv::Result<()> {
    let (l1, gw1) = bind()?;
    let (l2, gw2) = bind()?;
    let (g1, m1) = start_group("g1", &gw1, 10)?;
    let (g2, m2) = start_group("g2", &gw2, 20)?;
    let mut c1 = GatewayConfig::new(gw1.clone(), "g1", m1.clone(), None);
    c1.address = gw1.clone();
    let mut c2 = GatewayConfig::new(gw2.clone(), "g2", m2.clone(), Some(gw1.clone()));
    c2.address = gw2.clone();
    let h1 = spawn(l1, gw1.clone(), Gateway::new(c1)?, 1)?;
    let h2 = spawn(l2, gw2.clone(), Gateway::new(c2)?, 2)?;
    println!("g1 at {:?}, gateway {gw1}", m1.iter().map(|m| &m.address).collect::<Vec<_>>());
    println!("g2 at {:?}, gateway {gw2}", m2.iter().map(|m| &m.address).collect::<Vec<_>>());

    let t = Instant::now();
    request(&m1[0].address, ClientPut { scope: Scope::Local, key: b"here".to_vec(), value: b"g1 only".to_vec(), request_id: RequestId { client: 1, seq: 1 } }.into())?;
    println!("local put on g1 after {:?}", t.elapsed());
    for i in 0..3u64 {
        let key = format!("shared/{i}").into_bytes();
        let rid = RequestId { client: 1, seq: i + 2 };
        request(&m1[1].address, ClientPut { scope: Scope::Global, key: key.clone(), value: format!("v{i}").into_bytes(), request_id: rid }.into())?;
        let v = request(&m2[2].address, ClientGet { scope: Scope::Global, key: key.clone(), mode: ReadMode::Linearizable }.into())?;
        println!("global {} written via g1, read via g2: {:?}", String::from_utf8_lossy(&key), v.map(|v| String::from_utf8_lossy(&v).into_owned()));
    }

    for h in g1.into_iter().chain(g2).chain([h1, h2]) {
        h.stop();
    }
    Ok(())
}
