//! Config files for processes on the TCP transport.
//!
//! Both are JSON. Environment variables may override endpoints and data
//! directories, nothing else: `EDGEKV_LISTEN`, `EDGEKV_DATA_DIR`,
//! `EDGEKV_GATEWAY` (edge node), `EDGEKV_BOOTSTRAP` (gateway).

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::chord::ChordConfig;
use crate::edge::EdgeConfig;
use crate::error::{Error, Result};
use crate::gateway::GatewayConfig;
use crate::storage::{DataRoot, StorageOptions};
use crate::transport::ms;
use crate::wire::{Endpoint, Member};

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn env(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

/// An edge node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct NodeFile {
    /// Raft id; defaults to `listen`.
    #[serde(default)]
    pub node_id: Option<String>,
    pub group: String,
    /// Address to bind, also advertised to peers.
    pub listen: Endpoint,
    /// Every voter of the group, this node included.
    pub peers: Vec<Member>,
    #[serde(default)]
    pub gateway: Option<Endpoint>,
    /// WAL and snapshots; omitted means nothing is persisted.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub fsync: bool,
    #[serde(default = "election_ms")]
    pub election_timeout_ms: [u64; 2],
    #[serde(default = "heartbeat_ms")]
    pub heartbeat_ms: u64,
    #[serde(default = "local_ms")]
    pub local_timeout_ms: u64,
    #[serde(default = "global_ms")]
    pub global_timeout_ms: u64,
}

fn election_ms() -> [u64; 2] {
    [150, 300]
}
fn heartbeat_ms() -> u64 {
    50
}
fn local_ms() -> u64 {
    2000
}
fn global_ms() -> u64 {
    5000
}

impl NodeFile {
    pub fn load(path: &Path) -> Result<Self> {
        let mut f: NodeFile = read_json(path)?;
        f.apply_env();
        Ok(f)
    }

    pub fn apply_env(&mut self) {
        if let Some(v) = env("EDGEKV_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = env("EDGEKV_DATA_DIR") {
            self.data_dir = Some(v.into());
        }
        if let Some(v) = env("EDGEKV_GATEWAY") {
            self.gateway = Some(v);
        }
    }

    pub fn node_id(&self) -> String {
        self.node_id.clone().unwrap_or_else(|| self.listen.clone())
    }

    pub fn edge_config(&self) -> Result<EdgeConfig> {
        let mut c = EdgeConfig::new(self.node_id(), self.group.clone(), self.peers.clone(), self.gateway.clone());
        c.election_timeout = (ms(self.election_timeout_ms[0]), ms(self.election_timeout_ms[1]));
        c.heartbeat = ms(self.heartbeat_ms);
        c.local_timeout = ms(self.local_timeout_ms);
        c.global_timeout = ms(self.global_timeout_ms);
        match &self.data_dir {
            Some(dir) => {
                c.data = DataRoot::Fs(dir.clone());
                c.storage = StorageOptions { fsync: self.fsync, ..StorageOptions::default() };
            }
            None => {
                c.data = DataRoot::Volatile;
                c.storage = StorageOptions::volatile();
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// A gateway.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct GatewayFile {
    /// Defaults to `listen`.
    #[serde(default)]
    pub name: Option<String>,
    pub group: String,
    pub listen: Endpoint,
    /// Edge nodes of the group.
    pub members: Vec<Member>,
    /// Any gateway already in the overlay; omitted starts a new one.
    #[serde(default)]
    pub bootstrap: Option<Endpoint>,
    #[serde(default = "one")]
    pub vnodes: usize,
    #[serde(default = "cache")]
    pub cache_capacity: usize,
    #[serde(default = "yes")]
    pub backups: bool,
}

fn one() -> usize {
    1
}
fn cache() -> usize {
    1024
}
fn yes() -> bool {
    true
}

impl GatewayFile {
    pub fn load(path: &Path) -> Result<Self> {
        let mut f: GatewayFile = read_json(path)?;
        f.apply_env();
        Ok(f)
    }

    pub fn apply_env(&mut self) {
        if let Some(v) = env("EDGEKV_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = env("EDGEKV_BOOTSTRAP") {
            self.bootstrap = Some(v);
        }
    }

    pub fn gateway_config(&self) -> Result<GatewayConfig> {
        if self.members.is_empty() {
            return Err(Error::Config(format!("gateway of {} lists no members", self.group)));
        }
        if self.vnodes == 0 {
            return Err(Error::Config("vnodes must be at least 1".into()));
        }
        let name = self.name.clone().unwrap_or_else(|| self.listen.clone());
        let mut c = GatewayConfig::new(name, self.group.clone(), self.members.clone(), self.bootstrap.clone());
        c.address = self.listen.clone();
        c.vnodes = self.vnodes;
        c.cache_capacity = self.cache_capacity;
        c.backups = self.backups;
        c.chord = ChordConfig::default();
        Ok(c)
    }
}
