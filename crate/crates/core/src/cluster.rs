//! Cluster layout and the simulated cluster harness.
//!
//! [`ClusterTopology`] is the JSON topology file: groups of edge nodes,
//! one gateway per group, link profile. [`SimCluster`] instantiates a
//! topology inside a [`Sim`] and offers the operations tests and benchmarks
//! need: waiting for readiness, crashing and restarting nodes, partitioning
//! groups, and an ownership oracle for global keys.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chord::{ChordConfig, OverlayHost};
use crate::client::ScriptClient;
use crate::edge::{EdgeConfig, EdgeNode};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, GatewayConfig};
use crate::ring::Identifier;
use crate::storage::{DataRoot, StorageOptions};
use crate::transport::sim::{NodeInfo, Sim};
use crate::transport::{ms, Context, Process, Role, Tick, TopologyProfile};
use crate::wire::{ClientResponse, Endpoint, Member};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct GroupSpec {
    pub group_id: String,
    /// Edge node endpoints; each doubles as the node id.
    pub edge_nodes: Vec<Endpoint>,
    pub gateway_endpoint: Endpoint,
    #[serde(default = "one")]
    pub vnode_count: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TransportKind {
    #[default]
    Sim,
    Real,
}

/// A preset name or explicit per-class links.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    Named(String),
    Custom(TopologyProfile),
}

impl Default for ProfileSpec {
    fn default() -> Self {
        ProfileSpec::Named("edge".into())
    }
}

impl ProfileSpec {
    pub fn resolve(&self) -> Result<TopologyProfile> {
        match self {
            ProfileSpec::Named(n) => TopologyProfile::by_name(n).ok_or_else(|| Error::Config(format!("unknown profile {n:?}"))),
            ProfileSpec::Custom(p) => {
                p.validate().map_err(Error::Config)?;
                Ok(*p)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ClusterTopology {
    pub groups: Vec<GroupSpec>,
    /// Gateway join order; defaults to group order.
    #[serde(default)]
    pub overlay_bootstrap_order: Vec<Endpoint>,
    #[serde(default)]
    pub transport: TransportKind,
    #[serde(default)]
    pub profile: ProfileSpec,
}

impl ClusterTopology {
    /// `groups` groups of `nodes` edge nodes named `g<i>-n<j>`, gateways `gw-<i>`.
    pub fn uniform(groups: usize, nodes: usize, vnodes: usize) -> Self {
        let groups = (1..=groups)
            .map(|g| GroupSpec {
                group_id: format!("g{g}"),
                edge_nodes: (1..=nodes).map(|n| format!("g{g}-n{n}")).collect(),
                gateway_endpoint: format!("gw-{g}"),
                vnode_count: vnodes,
            })
            .collect();
        ClusterTopology { groups, overlay_bootstrap_order: Vec::new(), transport: TransportKind::Sim, profile: ProfileSpec::default() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let t: ClusterTopology = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Config("topology has no groups".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for g in &self.groups {
            if g.edge_nodes.is_empty() {
                return Err(Error::Config(format!("group {} has no edge nodes", g.group_id)));
            }
            if g.vnode_count == 0 {
                return Err(Error::Config(format!("group {} has vnodeCount 0", g.group_id)));
            }
            for name in g.edge_nodes.iter().chain([&g.gateway_endpoint, &g.group_id]) {
                if !seen.insert(name.clone()) {
                    return Err(Error::Config(format!("duplicate name {name:?} in topology")));
                }
            }
        }
        for b in &self.overlay_bootstrap_order {
            if !self.groups.iter().any(|g| &g.gateway_endpoint == b) {
                return Err(Error::Config(format!("bootstrap order names unknown gateway {b:?}")));
            }
        }
        self.profile.resolve()?;
        Ok(())
    }

    pub fn members(&self, group: &GroupSpec) -> Vec<Member> {
        group.edge_nodes.iter().map(|e| Member::new(e.clone(), e.clone())).collect()
    }

    /// Gateways in join order.
    pub fn join_order(&self) -> Vec<&GroupSpec> {
        if self.overlay_bootstrap_order.is_empty() {
            return self.groups.iter().collect();
        }
        let mut out: Vec<&GroupSpec> = self
            .overlay_bootstrap_order
            .iter()
            .filter_map(|b| self.groups.iter().find(|g| &g.gateway_endpoint == b))
            .collect();
        for g in &self.groups {
            if !out.iter().any(|x| x.group_id == g.group_id) {
                out.push(g);
            }
        }
        out
    }

    pub fn group(&self, id: &str) -> Option<&GroupSpec> {
        self.groups.iter().find(|g| g.group_id == id)
    }
}

/// Knobs applied to every node of a simulated cluster.
#[derive(Clone, Debug)]
pub struct ClusterOptions {
    pub chord: ChordConfig,
    pub cache_capacity: usize,
    pub backups: bool,
    pub storage: StorageOptions,
    /// Keep node state in shared memory so crashed nodes can recover.
    pub durable: bool,
    pub local_timeout: Tick,
    pub global_timeout: Tick,
    /// Record every message in the sim trace.
    pub trace: bool,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            chord: ChordConfig::default(),
            cache_capacity: 1024,
            backups: true,
            storage: StorageOptions::default(),
            durable: true,
            local_timeout: ms(2000),
            global_timeout: ms(5000),
            trace: false,
        }
    }
}

pub struct SimCluster {
    pub sim: Sim,
    pub topology: ClusterTopology,
    pub options: ClusterOptions,
    data: BTreeMap<String, DataRoot>,
}

impl SimCluster {
    /// Adds every edge node and gateway; gateways join one after another.
    pub fn build(topology: ClusterTopology, seed: u64, options: ClusterOptions) -> Result<Self> {
        topology.validate()?;
        let profile = topology.profile.resolve()?;
        let mut c = SimCluster { sim: Sim::new(seed, profile), topology, options, data: BTreeMap::new() };
        c.sim.record_trace(c.options.trace);
        let groups = c.topology.groups.clone();
        for g in &groups {
            for n in &g.edge_nodes {
                let root = if c.options.durable { DataRoot::memory() } else { DataRoot::Volatile };
                c.data.insert(n.clone(), root);
                let node = c.edge_node(g, n)?;
                c.sim.add_node(n, NodeInfo::new(Role::Storage, Some(&g.group_id)), Box::new(node));
            }
        }
        let order: Vec<GroupSpec> = c.topology.join_order().into_iter().cloned().collect();
        let first = order[0].gateway_endpoint.clone();
        for (i, g) in order.iter().enumerate() {
            let boot = (i > 0).then(|| first.clone());
            let gw = c.gateway(g, boot)?;
            c.sim.add_node(&g.gateway_endpoint, NodeInfo::new(Role::Gateway, Some(&g.group_id)), Box::new(gw));
            c.sim.advance(c.options.chord.join_stagger * g.vnode_count as u64 + ms(50));
        }
        Ok(c)
    }

    fn edge_node(&self, g: &GroupSpec, name: &str) -> Result<EdgeNode> {
        let mut cfg = EdgeConfig::new(name, &g.group_id, self.topology.members(g), Some(g.gateway_endpoint.clone()));
        cfg.storage = self.options.storage;
        cfg.data = self.data[name].clone();
        cfg.local_timeout = self.options.local_timeout;
        cfg.global_timeout = self.options.global_timeout;
        EdgeNode::new(cfg)
    }

    fn gateway(&self, g: &GroupSpec, bootstrap: Option<Endpoint>) -> Result<Gateway> {
        let mut cfg = GatewayConfig::new(&g.gateway_endpoint, &g.group_id, self.topology.members(g), bootstrap);
        cfg.vnodes = g.vnode_count;
        cfg.cache_capacity = self.options.cache_capacity;
        cfg.chord = self.options.chord;
        cfg.backups = self.options.backups;
        Gateway::new(cfg)
    }

    pub fn add_client(&mut self, name: &str, process: Box<dyn Process>) {
        self.sim.add_node(name, NodeInfo::new(Role::Client, None), process);
    }

    /// Sends one request from the [`ScriptClient`] named `client` and runs
    /// the simulation until it is answered.
    pub fn call(
        &mut self,
        client: &str,
        f: impl FnOnce(&mut ScriptClient, &mut dyn Context) -> u64,
    ) -> Result<ClientResponse> {
        let id = self
            .sim
            .invoke::<ScriptClient, _>(client, f)
            .ok_or_else(|| Error::InvalidArgument(format!("no script client {client}")))?;
        let name = client.to_string();
        let answered = |s: &Sim| s.node::<ScriptClient>(&name).is_some_and(|c| c.reply(id).is_some());
        self.sim.run_until_done(ms(30_000), answered)?;
        Ok(self.sim.node::<ScriptClient>(client).and_then(|c| c.reply(id)).cloned().expect("answered"))
    }

    pub fn group_ids(&self) -> Vec<String> {
        self.topology.groups.iter().map(|g| g.group_id.clone()).collect()
    }

    pub fn edge_nodes(&self, group: &str) -> Vec<String> {
        self.topology.group(group).map(|g| g.edge_nodes.clone()).unwrap_or_default()
    }

    pub fn gateway_of(&self, group: &str) -> Option<String> {
        self.topology.group(group).map(|g| g.gateway_endpoint.clone())
    }

    pub fn edge(&self, name: &str) -> Option<&EdgeNode> {
        self.sim.node::<EdgeNode>(name)
    }

    pub fn gateway_node(&self, group: &str) -> Option<&Gateway> {
        self.gateway_of(group).and_then(|g| self.sim.node::<Gateway>(&g))
    }

    pub fn leader_of(&self, group: &str) -> Option<String> {
        self.edge_nodes(group).into_iter().find(|n| self.sim.is_up(n) && self.edge(n).is_some_and(EdgeNode::is_leader))
    }

    /// All live vnode ids, sorted.
    pub fn vnode_ids(&self) -> Vec<(Identifier, String)> {
        let mut ids: Vec<(Identifier, String)> = self
            .topology
            .groups
            .iter()
            .filter(|g| self.sim.is_up(&g.gateway_endpoint))
            .filter_map(|g| self.sim.node::<Gateway>(&g.gateway_endpoint).map(|gw| (g, gw)))
            .flat_map(|(g, gw)| gw.overlay().vnodes().iter().map(|v| (v.id(), g.group_id.clone())).collect::<Vec<_>>())
            .collect();
        ids.sort();
        ids
    }

    /// Group that owns `key` according to the full membership.
    pub fn owner_group(&self, key: &[u8]) -> Option<String> {
        let h = self.options.chord.space.hash_id(key).ok()?;
        let ids = self.vnode_ids();
        let owner = ids.iter().find(|(id, _)| *id >= h).or_else(|| ids.first())?;
        Some(owner.1.clone())
    }

    /// Every vnode has its true successor and predecessor.
    pub fn overlay_converged(&self) -> bool {
        let ids = self.vnode_ids();
        if ids.is_empty() {
            return false;
        }
        self.topology.groups.iter().filter(|g| self.sim.is_up(&g.gateway_endpoint)).all(|g| {
            let Some(gw) = self.sim.node::<Gateway>(&g.gateway_endpoint) else {
                return false;
            };
            overlay_ring_ok(gw.overlay(), &ids)
        })
    }

    /// Every group has a leader, the overlay ring is correct, and with more
    /// than one group every gateway has a backup with learners in place.
    pub fn ready(&self) -> bool {
        let groups = self.group_ids();
        if !groups.iter().all(|g| self.leader_of(g).is_some()) || !self.overlay_converged() {
            return false;
        }
        if groups.len() < 2 || !self.options.backups {
            return true;
        }
        groups.iter().all(|g| {
            let Some(gw) = self.gateway_node(g) else {
                return false;
            };
            let Some(b) = gw.backup() else {
                return false;
            };
            let Some(l) = self.leader_of(g) else {
                return false;
            };
            let learners: Vec<String> = self.edge(&l).unwrap().replica().raft.learners().map(|m| m.id.clone()).collect();
            b.members.iter().all(|m| learners.contains(&m.id))
        })
    }

    pub fn wait_ready(&mut self, max: Tick) -> Result<Tick> {
        let start = self.sim.now();
        let step = ms(100);
        while !self.ready() {
            if self.sim.now() >= start + max {
                return Err(Error::HorizonExceeded(max));
            }
            self.sim.advance(step);
        }
        Ok(self.sim.now() - start)
    }

    /// Stops a node; its memory-backed data survives for [`Self::restart`].
    pub fn crash(&mut self, name: &str) {
        self.sim.crash(name);
    }

    /// Rebuilds a crashed edge node or gateway from its data directory.
    pub fn restart(&mut self, name: &str) -> Result<()> {
        for g in self.topology.groups.clone() {
            if g.edge_nodes.iter().any(|n| n == name) {
                let node = self.edge_node(&g, name)?;
                self.sim.restart(name, Box::new(node));
                return Ok(());
            }
            if g.gateway_endpoint == name {
                let first = self.topology.join_order()[0].gateway_endpoint.clone();
                let boot = (first != name).then_some(first);
                let gw = self.gateway(&g, boot)?;
                self.sim.restart(name, Box::new(gw));
                return Ok(());
            }
        }
        Err(Error::InvalidArgument(format!("unknown node {name}")))
    }

    /// Cuts the edge nodes of `group` off from every other node.
    pub fn isolate_group(&mut self, group: &str) {
        let nodes = self.edge_nodes(group);
        self.sim.isolate(&nodes);
    }

    pub fn heal(&mut self) {
        self.sim.heal();
    }
}

/// Whether every vnode of `host` has the successor and predecessor that
/// the sorted id list says it should.
pub fn overlay_ring_ok(host: &OverlayHost, ids: &[(Identifier, String)]) -> bool {
    host.vnodes().iter().all(|v| {
        let Some(pos) = ids.iter().position(|(x, _)| *x == v.id()) else {
            return false;
        };
        let succ = ids[(pos + 1) % ids.len()].0;
        let pred = ids[(pos + ids.len() - 1) % ids.len()].0;
        v.is_joined() && v.successor().id == succ && (ids.len() == 1 || v.predecessor().map(|p| p.id) == Some(pred))
    })
}
