//! Message delivery.
//!
//! Protocol nodes are written as [`Process`] state machines that react to
//! messages and timers through a [`Context`]. Two runtimes drive them: the
//! deterministic [`sim::Sim`] with shaped links, and the TCP runtime in
//! [`tcp`]. Both push every message through the same wire codec.

use std::any::Any;

use rand::RngCore;

use crate::wire::Envelope;

pub mod profile;
pub mod sim;
pub mod tcp;

pub use profile::{LinkClass, LinkProfile, Role, TopologyProfile};

/// Virtual time unit: 0.01 ms.
pub type Tick = u64;

pub const TICKS_PER_MS: u64 = 100;

/// Milliseconds to ticks.
pub const fn ms(millis: u64) -> Tick {
    millis * TICKS_PER_MS
}

pub fn ticks_to_ms(t: Tick) -> f64 {
    t as f64 / TICKS_PER_MS as f64
}

/// Something a node reports to whoever is running it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Observation {
    BecameLeader { group: String, term: u64 },
    SteppedDown { group: String, term: u64 },
    BackupAssigned { group: String, backup: String },
    JoinedOverlay { id: String },
    Note(String),
}

/// The node's view of its runtime while it handles one event.
pub trait Context {
    fn now(&self) -> Tick;
    fn me(&self) -> &str;
    fn send(&mut self, to: &str, env: Envelope);
    /// Fires `on_timer(token)` after `delay`. Timers cannot be cancelled;
    /// nodes ignore stale tokens.
    fn set_timer(&mut self, delay: Tick, token: u64);
    fn rng(&mut self) -> &mut dyn RngCore;
    /// Fresh request id, unique for this sender.
    fn next_id(&mut self) -> u64;
    /// Starts a new causal chain; messages sent from here on inherit it.
    fn begin_cause(&mut self) -> u64 {
        0
    }
    fn observe(&mut self, obs: Observation);
}

/// A protocol node.
pub trait Process: Any {
    fn start(&mut self, _ctx: &mut dyn Context) {}
    fn on_message(&mut self, ctx: &mut dyn Context, from: &str, env: Envelope);
    fn on_timer(&mut self, ctx: &mut dyn Context, token: u64);
    /// Flush durable state before the process exits.
    fn shutdown(&mut self) {}
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

/// Implements the `Any` plumbing of [`Process`].
#[macro_export]
macro_rules! impl_any {
    () => {
        fn as_any(&self) -> &dyn ::std::any::Any {
            self
        }
        fn as_any_mut(&mut self) -> &mut dyn ::std::any::Any {
            self
        }
    };
}

/// A [`Context`] that records what a node does instead of doing it. Handy
/// for driving a single node by hand.
pub struct RecordingContext {
    pub now: Tick,
    pub me: String,
    pub sent: Vec<(String, Envelope)>,
    pub timers: Vec<(Tick, u64)>,
    pub observations: Vec<Observation>,
    rng: rand_chacha::ChaCha8Rng,
    next_id: u64,
}

impl RecordingContext {
    pub fn new(me: &str, seed: u64) -> Self {
        use rand::SeedableRng;
        RecordingContext {
            now: 0,
            me: me.to_string(),
            sent: Vec::new(),
            timers: Vec::new(),
            observations: Vec::new(),
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
            next_id: 0,
        }
    }

    pub fn take_sent(&mut self) -> Vec<(String, Envelope)> {
        std::mem::take(&mut self.sent)
    }
}

impl Context for RecordingContext {
    fn now(&self) -> Tick {
        self.now
    }
    fn me(&self) -> &str {
        &self.me
    }
    fn send(&mut self, to: &str, env: Envelope) {
        self.sent.push((to.to_string(), env));
    }
    fn set_timer(&mut self, delay: Tick, token: u64) {
        self.timers.push((self.now + delay, token));
    }
    fn rng(&mut self) -> &mut dyn RngCore {
        &mut self.rng
    }
    fn next_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }
    fn observe(&mut self, obs: Observation) {
        self.observations.push(obs);
    }
}
