//! TCP runtime: hosts one process on a real socket.
//!
//! Every connection opens with a hello frame (the usual 4-byte length
//! prefix, then `{"from": <endpoint>, "listening": bool}`), followed by wire
//! frames in both directions. A node introduces itself with its advertised
//! listen endpoint and is answered on a connection of the receiver's own. A
//! client that does not listen gets its replies back on the connection it
//! opened.
//!
//! The process itself runs on a single event-loop thread, so handlers are
//! serialized exactly as in the simulator. Readers and writers are one
//! thread per connection.

use std::collections::{BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Context, Observation, Process, Tick, TICKS_PER_MS};
use crate::error::{Error, Result};
use crate::wire::{self, Endpoint, Envelope, Message, MAX_FRAME};

const CONNECT_TIMEOUT: Duration = Duration::from_millis(500);
/// Longest the event loop sleeps before rechecking the stop flag.
const POLL: Duration = Duration::from_millis(50);

#[derive(Serialize, Deserialize)]
struct Hello {
    from: Endpoint,
    listening: bool,
}

fn write_hello(stream: &mut TcpStream, from: &str, listening: bool) -> io::Result<()> {
    let body = serde_json::to_vec(&Hello { from: from.to_string(), listening })?;
    stream.write_all(&(body.len() as u32).to_be_bytes())?;
    stream.write_all(&body)
}

/// Reads one length-prefixed frame body. `Ok(None)` on clean EOF.
fn read_frame(stream: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match stream.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, Error::FrameTooLarge(len)));
    }
    let mut body = vec![0u8; len];
    stream.read_exact(&mut body)?;
    Ok(Some(body))
}

fn resolve(endpoint: &str) -> io::Result<SocketAddr> {
    endpoint
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("cannot resolve {endpoint}")))
}

/// Frame queues per destination, each drained by a writer thread.
#[derive(Clone)]
struct Outbox {
    me: Endpoint,
    writers: Arc<Mutex<HashMap<Endpoint, Sender<Vec<u8>>>>>,
}

impl Outbox {
    fn send(&self, to: &str, frame: Vec<u8>) {
        let mut writers = self.writers.lock().unwrap();
        if let Some(tx) = writers.get(to) {
            if tx.send(frame.clone()).is_ok() {
                return;
            }
        }
        let (tx, rx) = mpsc::channel();
        tx.send(frame).unwrap();
        writers.insert(to.to_string(), tx);
        let (me, to, outbox) = (self.me.clone(), to.to_string(), self.clone());
        thread::spawn(move || {
            let result = resolve(&to).and_then(|addr| {
                let mut s = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT)?;
                s.set_nodelay(true)?;
                write_hello(&mut s, &me, true)?;
                Ok(s)
            });
            match result {
                Ok(s) => outbox.drain(&to, s, rx),
                Err(e) => {
                    tracing::debug!(%to, error = %e, "connect failed; dropping queued frames");
                    outbox.forget(&to);
                }
            }
        });
    }

    /// Writes frames until the queue closes or the peer goes away.
    fn drain(&self, to: &str, mut stream: TcpStream, rx: Receiver<Vec<u8>>) {
        for frame in rx {
            if let Err(e) = stream.write_all(&frame) {
                tracing::debug!(%to, error = %e, "write failed; connection dropped");
                break;
            }
        }
        self.forget(to);
        let _ = stream.shutdown(Shutdown::Both);
    }

    fn forget(&self, to: &str) {
        self.writers.lock().unwrap().remove(to);
    }

    /// Routes replies for a non-listening client over its own connection.
    fn adopt(&self, client: &str, stream: TcpStream) {
        let (tx, rx) = mpsc::channel();
        self.writers.lock().unwrap().insert(client.to_string(), tx);
        let (outbox, client) = (self.clone(), client.to_string());
        thread::spawn(move || outbox.drain(&client, stream, rx));
    }
}

enum Event {
    Frame { from: Endpoint, env: Envelope },
}

fn serve_connection(mut stream: TcpStream, events: Sender<Event>, outbox: Outbox) {
    let _ = stream.set_nodelay(true);
    let hello = match read_frame(&mut stream).and_then(|b| {
        let b = b.ok_or_else(|| io::Error::from(io::ErrorKind::UnexpectedEof))?;
        serde_json::from_slice::<Hello>(&b).map_err(io::Error::from)
    }) {
        Ok(h) => h,
        Err(e) => {
            tracing::debug!(error = %e, "bad hello; closing connection");
            return;
        }
    };
    if !hello.listening {
        match stream.try_clone() {
            Ok(w) => outbox.adopt(&hello.from, w),
            Err(_) => return,
        }
    }
    loop {
        let body = match read_frame(&mut stream) {
            Ok(Some(b)) => b,
            Ok(None) => break,
            Err(e) => {
                tracing::debug!(from = %hello.from, error = %e, "read failed");
                break;
            }
        };
        match wire::decode_payload(&body) {
            Ok(env) => {
                if events.send(Event::Frame { from: hello.from.clone(), env }).is_err() {
                    break;
                }
            }
            Err(e) => {
                // A peer speaking garbage loses its connection, not the node.
                tracing::warn!(from = %hello.from, error = %e, "undecodable frame; closing connection");
                break;
            }
        }
    }
    if !hello.listening {
        outbox.forget(&hello.from);
    }
}

struct LoopCtx<'a> {
    start: Instant,
    me: &'a str,
    outbox: &'a Outbox,
    timers: &'a mut Vec<(Tick, u64)>,
    rng: &'a mut ChaCha8Rng,
    next_id: &'a mut u64,
    observations: &'a Sender<(Tick, Observation)>,
}

fn now_ticks(start: Instant) -> Tick {
    (start.elapsed().as_micros() / 10) as Tick
}

impl Context for LoopCtx<'_> {
    fn now(&self) -> Tick {
        now_ticks(self.start)
    }
    fn me(&self) -> &str {
        self.me
    }
    fn send(&mut self, to: &str, env: Envelope) {
        match wire::encode(&env) {
            Ok(frame) => self.outbox.send(to, frame),
            Err(e) => tracing::error!(%to, error = %e, "cannot encode outgoing message"),
        }
    }
    fn set_timer(&mut self, delay: Tick, token: u64) {
        let at = self.now() + delay;
        self.timers.push((at, token));
    }
    fn rng(&mut self) -> &mut dyn RngCore {
        self.rng
    }
    fn next_id(&mut self) -> u64 {
        *self.next_id += 1;
        *self.next_id
    }
    fn observe(&mut self, obs: Observation) {
        tracing::info!(node = %self.me, ?obs, "observation");
        let _ = self.observations.send((self.now(), obs));
    }
}

/// A process running on the TCP runtime.
pub struct NodeHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    observations: Receiver<(Tick, Observation)>,
}

impl NodeHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Flag that stops the node when set; hand it to a signal handler.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    /// Observations reported so far, with the node-local time they happened.
    pub fn observations(&self) -> Vec<(Tick, Observation)> {
        self.observations.try_iter().collect()
    }

    /// Blocks until the node stops (after its stop flag is set).
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Stops the node, letting it flush durable state, and waits for it.
    pub fn stop(self) {
        self.stop.store(true, Ordering::SeqCst);
        self.wait();
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

/// Runs `process` on `listener`. `me` is the endpoint peers use to reach
/// it, which must resolve to the listener's address.
pub fn spawn<P: Process + Send>(listener: TcpListener, me: Endpoint, process: P, seed: u64) -> Result<NodeHandle> {
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let (events_tx, events) = mpsc::channel();
    let (obs_tx, observations) = mpsc::channel();
    let outbox = Outbox { me: me.clone(), writers: Arc::default() };

    listener.set_nonblocking(true)?;
    {
        let (stop, outbox) = (stop.clone(), outbox.clone());
        thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((s, _)) => {
                        let _ = s.set_nonblocking(false);
                        let (tx, ob) = (events_tx.clone(), outbox.clone());
                        thread::spawn(move || serve_connection(s, tx, ob));
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                    Err(e) => {
                        tracing::error!(error = %e, "accept failed");
                        thread::sleep(POLL);
                    }
                }
            }
        });
    }

    let flag = stop.clone();
    let thread = thread::spawn(move || event_loop(process, me, outbox, events, obs_tx, flag, seed));
    Ok(NodeHandle { addr, stop, thread: Some(thread), observations })
}

fn event_loop<P: Process>(
    mut process: P,
    me: Endpoint,
    outbox: Outbox,
    events: Receiver<Event>,
    observations: Sender<(Tick, Observation)>,
    stop: Arc<AtomicBool>,
    seed: u64,
) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_id = 0u64;
    let mut armed: Vec<(Tick, u64)> = Vec::new();
    // (deadline, arm order, token)
    let mut timers: BinaryHeap<Reverse<(Tick, u64, u64)>> = BinaryHeap::new();
    let mut armed_count = 0u64;

    macro_rules! with_ctx {
        ($f:expr) => {{
            let mut ctx = LoopCtx {
                start,
                me: &me,
                outbox: &outbox,
                timers: &mut armed,
                rng: &mut rng,
                next_id: &mut next_id,
                observations: &observations,
            };
            $f(&mut process, &mut ctx as &mut dyn Context);
            for (at, token) in armed.drain(..) {
                armed_count += 1;
                timers.push(Reverse((at, armed_count, token)));
            }
        }};
    }

    with_ctx!(|p: &mut P, ctx: &mut dyn Context| p.start(ctx));
    while !stop.load(Ordering::SeqCst) {
        let now = now_ticks(start);
        while let Some(&Reverse((at, _, token))) = timers.peek() {
            if at > now {
                break;
            }
            timers.pop();
            with_ctx!(|p: &mut P, ctx: &mut dyn Context| p.on_timer(ctx, token));
        }
        let wait = timers
            .peek()
            .map(|Reverse((at, _, _))| Duration::from_micros(at.saturating_sub(now_ticks(start)) * 1000 / TICKS_PER_MS))
            .unwrap_or(POLL)
            .min(POLL);
        match events.recv_timeout(wait) {
            Ok(Event::Frame { from, env }) => with_ctx!(|p: &mut P, ctx: &mut dyn Context| p.on_message(ctx, &from, env)),
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
    process.shutdown();
    outbox.writers.lock().unwrap().clear();
}

/// Blocking request/response client for the CLI and tests.
pub struct TcpClient {
    stream: TcpStream,
    next_id: u64,
}

impl TcpClient {
    /// Connects to `endpoint`, introducing itself as `name`.
    pub fn connect(endpoint: &str, name: &str, timeout: Duration) -> Result<Self> {
        let mut stream = TcpStream::connect_timeout(&resolve(endpoint)?, timeout)?;
        stream.set_nodelay(true)?;
        write_hello(&mut stream, name, false)?;
        Ok(TcpClient { stream, next_id: 0 })
    }

    /// Sends `msg` and waits for the reply with the same envelope id.
    pub fn request(&mut self, msg: impl Into<Message>, timeout: Duration) -> Result<Envelope> {
        self.next_id += 1;
        let id = self.next_id;
        self.stream.write_all(&wire::encode(&Envelope::new(id, msg))?)?;
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(io::Error::new(io::ErrorKind::TimedOut, "no reply before the deadline").into());
            }
            self.stream.set_read_timeout(Some(left))?;
            let body = match read_frame(&mut self.stream) {
                Ok(Some(b)) => b,
                Ok(None) => return Err(io::Error::from(io::ErrorKind::ConnectionAborted).into()),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Err(io::Error::new(io::ErrorKind::TimedOut, "no reply before the deadline").into())
                }
                Err(e) => return Err(e.into()),
            };
            let env = wire::decode_payload(&body)?;
            if env.id == id {
                return Ok(env);
            }
        }
    }
}
