//! Workload description and key generators.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wire::{ReadMode, Scope};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    #[default]
    Uniform,
    /// A fixed fraction of keys receives a fixed fraction of operations.
    Hotspot,
    /// Skewed toward the most recently inserted keys.
    Latest,
}

impl Distribution {
    pub fn as_str(self) -> &'static str {
        match self {
            Distribution::Uniform => "uniform",
            Distribution::Hotspot => "hotspot",
            Distribution::Latest => "latest",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct WorkloadSpec {
    pub record_count: usize,
    /// Operations issued by each client in the run phase.
    pub operation_count: usize,
    pub read_proportion: f64,
    pub update_proportion: f64,
    pub distribution: Distribution,
    pub hotspot_data_fraction: f64,
    pub hotspot_op_fraction: f64,
    pub latest_skew: f64,
    pub global_proportion: f64,
    pub clients: usize,
    pub threads_per_client: usize,
    pub value_size_bytes: usize,
    pub read_mode: ReadMode,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            record_count: 10_000,
            operation_count: 10_000,
            read_proportion: 0.5,
            update_proportion: 0.5,
            distribution: Distribution::Uniform,
            hotspot_data_fraction: 0.2,
            hotspot_op_fraction: 0.8,
            latest_skew: 0.99,
            global_proportion: 0.0,
            clients: 3,
            threads_per_client: 100,
            value_size_bytes: 1024,
            read_mode: ReadMode::Linearizable,
            seed: 1,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("workload: {m}")));
        if (self.read_proportion + self.update_proportion - 1.0).abs() > 1e-9 {
            return bad("readProportion + updateProportion must be 1");
        }
        if !(0.0..=1.0).contains(&self.read_proportion) {
            return bad("readProportion outside [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.global_proportion) {
            return bad("globalProportion outside [0, 1]");
        }
        if !(0.0..1.0).contains(&self.hotspot_data_fraction) || self.hotspot_data_fraction == 0.0 {
            return bad("hotspotDataFraction outside (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.hotspot_op_fraction) {
            return bad("hotspotOpFraction outside [0, 1]");
        }
        if self.latest_skew.is_nan() || self.latest_skew <= 0.0 {
            return bad("latestSkew must be positive");
        }
        if self.clients == 0 || self.threads_per_client == 0 {
            return bad("clients and threadsPerClient must be at least 1");
        }
        Ok(())
    }

    pub fn chooser(&self) -> Result<KeyChooser> {
        KeyChooser::new(self.distribution, self.record_count, self.hotspot_data_fraction, self.hotspot_op_fraction, self.latest_skew)
    }

    /// Independent RNG stream for one session of one client.
    pub fn session_rng(&self, client: usize, session: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((client as u64) << 32) | session as u64);
        rng
    }

    /// Operations each session of a client issues; the first sessions take the remainder.
    pub fn session_ops(&self, session: usize) -> usize {
        let t = self.threads_per_client;
        self.operation_count / t + usize::from(session < self.operation_count % t)
    }
}

pub fn key_name(index: usize) -> Vec<u8> {
    format!("user{index}").into_bytes()
}

/// Draws record indices in `0..records`.
#[derive(Clone, Debug)]
pub enum KeyChooser {
    Empty,
    Uniform { records: usize },
    Hotspot { records: usize, hot: usize, op_fraction: f64 },
    /// Index `records - z` for a Zipf draw `z` in `1..=records`.
    Latest { records: usize, zipf: Zipf<f64> },
}

impl KeyChooser {
    pub fn new(dist: Distribution, records: usize, data_fraction: f64, op_fraction: f64, skew: f64) -> Result<Self> {
        if records == 0 {
            return Ok(KeyChooser::Empty);
        }
        Ok(match dist {
            Distribution::Uniform => KeyChooser::Uniform { records },
            Distribution::Hotspot => {
                let hot = ((records as f64 * data_fraction) as usize).clamp(1, records);
                KeyChooser::Hotspot { records, hot, op_fraction }
            }
            Distribution::Latest => {
                let zipf = Zipf::new(records as f64, skew).map_err(|e| Error::Config(format!("latest distribution: {e}")))?;
                KeyChooser::Latest { records, zipf }
            }
        })
    }

    /// Indices below this are the hot set of a hotspot chooser.
    pub fn hot_set(&self) -> Option<usize> {
        match self {
            KeyChooser::Hotspot { hot, .. } => Some(*hot),
            _ => None,
        }
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> Option<usize> {
        match self {
            KeyChooser::Empty => None,
            KeyChooser::Uniform { records } => Some(rng.random_range(0..*records)),
            KeyChooser::Hotspot { records, hot, op_fraction } => {
                let in_hot = rng.random::<f64>() < *op_fraction;
                if in_hot || hot == records {
                    Some(rng.random_range(0..*hot))
                } else {
                    Some(rng.random_range(*hot..*records))
                }
            }
            KeyChooser::Latest { records, zipf } => {
                let z = zipf.sample(rng) as usize;
                Some(records - z.clamp(1, *records))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Read,
    Update,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Op {
    pub kind: OpKind,
    pub scope: Scope,
    pub key: usize,
}

/// Draws the next run-phase operation. The draw order is fixed so a
/// session's sequence depends only on its RNG.
pub fn next_op(spec: &WorkloadSpec, chooser: &KeyChooser, rng: &mut dyn RngCore) -> Option<Op> {
    let kind = if rng.random::<f64>() < spec.read_proportion { OpKind::Read } else { OpKind::Update };
    let scope = if rng.random::<f64>() < spec.global_proportion { Scope::Global } else { Scope::Local };
    let key = chooser.sample(rng)?;
    Some(Op { kind, scope, key })
}

/// Deterministic value payload of `size` bytes.
pub fn value_for(size: usize, key: usize, version: u64) -> Vec<u8> {
    let seed = (key as u64).wrapping_mul(31).wrapping_add(version);
    (0..size).map(|i| b'a' + ((seed + i as u64) % 26) as u8).collect()
}
