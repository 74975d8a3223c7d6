//! Link shaping profiles for the edge and cloud settings.

use serde::{Deserialize, Serialize};

use super::{Tick, TICKS_PER_MS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LinkProfile {
    /// One-way delay.
    pub latency_ms: f64,
    pub bandwidth_mbps: f64,
}

impl LinkProfile {
    pub const fn new(latency_ms: f64, bandwidth_mbps: f64) -> Self {
        LinkProfile { latency_ms, bandwidth_mbps }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.latency_ms.is_nan() || self.latency_ms < 0.0 || self.bandwidth_mbps.is_nan() || self.bandwidth_mbps <= 0.0 {
            return Err(format!("bad link profile {self:?}: need latency >= 0 and bandwidth > 0"));
        }
        Ok(())
    }

    pub fn latency_ticks(&self) -> Tick {
        (self.latency_ms * TICKS_PER_MS as f64).round() as Tick
    }

    /// Time to push `bytes` onto the wire.
    pub fn serialization_ticks(&self, bytes: usize) -> Tick {
        let seconds = (bytes as f64 * 8.0) / (self.bandwidth_mbps * 1e6);
        (seconds * 1000.0 * TICKS_PER_MS as f64).round() as Tick
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Client,
    Storage,
    Gateway,
}

/// Which row of the link table a hop uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkClass {
    #[serde(rename = "Cli-St")]
    CliSt,
    #[serde(rename = "St-St")]
    StSt,
    #[serde(rename = "St-Gw")]
    StGw,
    #[serde(rename = "Gw-Gw")]
    GwGw,
}

impl LinkClass {
    /// Classifies a hop between two nodes. Traffic that leaves a group
    /// (other than to its own gateway) crosses the wide-area Gw-Gw class.
    pub fn between(a: (Role, Option<&str>), b: (Role, Option<&str>)) -> LinkClass {
        use Role::*;
        let same_group = a.1.is_some() && a.1 == b.1;
        match (a.0, b.0) {
            (Client, _) | (_, Client) => LinkClass::CliSt,
            (Storage, Storage) if same_group => LinkClass::StSt,
            (Storage, Gateway) | (Gateway, Storage) if same_group => LinkClass::StGw,
            _ => LinkClass::GwGw,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TopologyProfile {
    pub cli_st: LinkProfile,
    pub st_st: LinkProfile,
    pub st_gw: LinkProfile,
    pub gw_gw: LinkProfile,
}

impl TopologyProfile {
    /// Nearby edge servers.
    pub const EDGE: TopologyProfile = TopologyProfile {
        cli_st: LinkProfile::new(5.0, 100.0),
        st_st: LinkProfile::new(2.0, 1000.0),
        st_gw: LinkProfile::new(2.0, 750.0),
        gw_gw: LinkProfile::new(10.0, 500.0),
    };

    /// A remote data center: one slow client hop, everything else co-located.
    pub const CLOUD: TopologyProfile = TopologyProfile {
        cli_st: LinkProfile::new(50.0, 100.0),
        st_st: LinkProfile::new(0.05, 1000.0),
        st_gw: LinkProfile::new(0.05, 1000.0),
        gw_gw: LinkProfile::new(0.05, 1000.0),
    };

    pub fn by_name(name: &str) -> Option<TopologyProfile> {
        match name {
            "edge" => Some(Self::EDGE),
            "cloud" => Some(Self::CLOUD),
            _ => None,
        }
    }

    pub fn link(&self, class: LinkClass) -> LinkProfile {
        match class {
            LinkClass::CliSt => self.cli_st,
            LinkClass::StSt => self.st_st,
            LinkClass::StGw => self.st_gw,
            LinkClass::GwGw => self.gw_gw,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        [self.cli_st, self.st_st, self.st_gw, self.gw_gw].iter().try_for_each(LinkProfile::validate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_link_table() {
        let e = TopologyProfile::EDGE;
        assert_eq!((e.cli_st.latency_ms, e.cli_st.bandwidth_mbps), (5.0, 100.0));
        assert_eq!((e.st_st.latency_ms, e.st_st.bandwidth_mbps), (2.0, 1000.0));
        assert_eq!((e.st_gw.latency_ms, e.st_gw.bandwidth_mbps), (2.0, 750.0));
        assert_eq!((e.gw_gw.latency_ms, e.gw_gw.bandwidth_mbps), (10.0, 500.0));
        let c = TopologyProfile::CLOUD;
        assert_eq!((c.cli_st.latency_ms, c.cli_st.bandwidth_mbps), (50.0, 100.0));
        assert_eq!((c.st_st.latency_ms, c.st_st.bandwidth_mbps), (0.05, 1000.0));
        assert_eq!((c.st_gw.latency_ms, c.st_gw.bandwidth_mbps), (0.05, 1000.0));
        assert_eq!((c.gw_gw.latency_ms, c.gw_gw.bandwidth_mbps), (0.05, 1000.0));
    }

    #[test]
    fn shaping_arithmetic() {
        let edge = TopologyProfile::EDGE.cli_st;
        assert_eq!(edge.latency_ticks() + edge.serialization_ticks(1000), 500 + 8);
        let cloud = TopologyProfile::CLOUD.cli_st;
        assert_eq!(cloud.latency_ticks() + cloud.serialization_ticks(1000), 5000 + 8);
        assert_eq!(TopologyProfile::CLOUD.st_st.latency_ticks(), 5);
    }

    #[test]
    fn classification() {
        use Role::*;
        assert_eq!(LinkClass::between((Client, Some("a")), (Storage, Some("a"))), LinkClass::CliSt);
        assert_eq!(LinkClass::between((Storage, Some("a")), (Storage, Some("a"))), LinkClass::StSt);
        assert_eq!(LinkClass::between((Storage, Some("a")), (Gateway, Some("a"))), LinkClass::StGw);
        assert_eq!(LinkClass::between((Gateway, Some("a")), (Gateway, Some("b"))), LinkClass::GwGw);
        assert_eq!(LinkClass::between((Storage, Some("a")), (Storage, Some("b"))), LinkClass::GwGw);
    }

    #[test]
    fn invalid_profiles_rejected() {
        assert!(LinkProfile::new(-1.0, 10.0).validate().is_err());
        assert!(LinkProfile::new(1.0, 0.0).validate().is_err());
    }
}
