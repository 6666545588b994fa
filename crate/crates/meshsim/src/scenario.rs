//! Scenario files: loading, validation, canonical digests and the built-in
//! presets.
//!
//! Scenarios are TOML with an explicit `schema` version. Unknown fields are
//! rejected so typos in experiment configs surface immediately. Every
//! default is filled in at load time, so the scenario echoed into a report
//! carries the complete effective configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aal2r::QueuePriority;
use crate::net::{ChannelId, NodeId, NodeSpec, RadioSpec, Topology};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Gsr,
    Aal2r,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Gsr => write!(f, "gsr"),
            Protocol::Aal2r => write!(f, "aal2r"),
        }
    }
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gsr" => Ok(Protocol::Gsr),
            "aal2r" => Ok(Protocol::Aal2r),
            other => Err(format!(
                "unknown protocol `{other}` (expected gsr or aal2r)"
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioDef {
    pub channel: u16,
    #[serde(default = "default_rate_bps")]
    pub rate_bps: u64,
}

fn default_rate_bps() -> u64 {
    6_000_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDef {
    pub id: u32,
    pub position: [f64; 2],
    pub radios: Vec<RadioDef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Cbr,
    Reliable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowDef {
    pub id: u32,
    pub kind: FlowKind,
    pub src: u32,
    pub dst: u32,
    #[serde(default = "default_pkt_bytes")]
    pub pkt_bytes: u32,
    pub start_s: f64,
    pub stop_s: f64,
    /// Packets per second; CBR flows only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_pps: Option<f64>,
    /// Fixed window size; reliable flows only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<u32>,
    /// Initial retransmission timeout; reliable flows only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rto_initial_s: Option<f64>,
}

fn default_pkt_bytes() -> u32 {
    512
}

pub const DEFAULT_RELIABLE_WINDOW: u32 = 8;
pub const DEFAULT_RTO_INITIAL_S: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkAction {
    Up,
    Down,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkEventDef {
    pub at_s: f64,
    pub action: LinkAction,
    pub a: u32,
    pub b: u32,
    /// Restricts the event to one channel; omitted means every link between
    /// the pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<u16>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GsrSection {
    #[serde(default = "default_update_interval")]
    pub update_interval_s: f64,
}

fn default_update_interval() -> f64 {
    1.0
}

impl Default for GsrSection {
    fn default() -> Self {
        GsrSection {
            update_interval_s: default_update_interval(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aal2rSection {
    #[serde(default = "default_queue_priority")]
    pub queue_priority: QueuePriority,
    #[serde(default)]
    pub hold_time_s: f64,
}

fn default_queue_priority() -> QueuePriority {
    QueuePriority::OldestHead
}

impl Default for Aal2rSection {
    fn default() -> Self {
        Aal2rSection {
            queue_priority: default_queue_priority(),
            hold_time_s: 0.0,
        }
    }
}

/// A complete experiment description. Construct via [`Scenario::load`] or
/// [`preset`]; both return fully validated scenarios with every default
/// resolved.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: u32,
    pub duration_s: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub protocol: Protocol,
    #[serde(default = "default_mtu")]
    pub mtu_bytes: u32,
    #[serde(default = "default_header")]
    pub header_bytes: u32,
    pub transmission_range_m: f64,
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity_pkts: u32,
    /// Per-frame erasure probability applied to every link.
    #[serde(default)]
    pub link_loss_prob: f64,
    #[serde(default = "default_series_bin")]
    pub series_bin_s: f64,
    #[serde(default)]
    pub gsr: GsrSection,
    #[serde(default)]
    pub aal2r: Aal2rSection,
    pub nodes: Vec<NodeDef>,
    pub flows: Vec<FlowDef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub link_events: Vec<LinkEventDef>,
}

fn default_seed() -> u64 {
    1
}
fn default_mtu() -> u32 {
    1500
}
fn default_header() -> u32 {
    28
}
fn default_queue_capacity() -> u32 {
    50
}
fn default_series_bin() -> f64 {
    1.0
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to read scenario file `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown preset `{0}` (expected paper-10node, line-3 or grid-9)")]
    UnknownPreset(String),
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Scenario::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Scenario, ScenarioError> {
        let mut sc: Scenario = toml::from_str(text)?;
        sc.normalize();
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    /// Short content hash identifying the effective configuration.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        let out = hasher.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Fills per-flow defaults so the echoed config is complete.
    fn normalize(&mut self) {
        for flow in &mut self.flows {
            if flow.kind == FlowKind::Reliable {
                flow.window.get_or_insert(DEFAULT_RELIABLE_WINDOW);
                flow.rto_initial_s.get_or_insert(DEFAULT_RTO_INITIAL_S);
            }
        }
    }

    pub fn payload_capacity(&self) -> u32 {
        self.mtu_bytes.saturating_sub(self.header_bytes)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |msg: String| Err(ScenarioError::Invalid(msg));
        if self.schema != SCHEMA_VERSION {
            return fail(format!(
                "schema: version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema
            ));
        }
        if !self.duration_s.is_finite() || self.duration_s <= 0.0 {
            return fail(format!(
                "duration_s: {} must be finite and > 0",
                self.duration_s
            ));
        }
        if self.header_bytes >= self.mtu_bytes {
            return fail(format!(
                "header_bytes: {} must be smaller than mtu_bytes {}",
                self.header_bytes, self.mtu_bytes
            ));
        }
        if !self.transmission_range_m.is_finite() || self.transmission_range_m <= 0.0 {
            return fail(format!(
                "transmission_range_m: {} must be finite and > 0",
                self.transmission_range_m
            ));
        }
        if self.queue_capacity_pkts == 0 {
            return fail("queue_capacity_pkts: must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.link_loss_prob) {
            return fail(format!(
                "link_loss_prob: {} outside [0, 1]",
                self.link_loss_prob
            ));
        }
        if !self.series_bin_s.is_finite() || self.series_bin_s <= 0.0 {
            return fail(format!(
                "series_bin_s: {} must be finite and > 0",
                self.series_bin_s
            ));
        }
        if !self.gsr.update_interval_s.is_finite() || self.gsr.update_interval_s <= 0.0 {
            return fail(format!(
                "gsr.update_interval_s: {} must be finite and > 0",
                self.gsr.update_interval_s
            ));
        }
        if !self.aal2r.hold_time_s.is_finite() || self.aal2r.hold_time_s < 0.0 {
            return fail(format!(
                "aal2r.hold_time_s: {} must be finite and >= 0",
                self.aal2r.hold_time_s
            ));
        }
        if self.nodes.is_empty() {
            return fail("nodes: at least one node required".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !(n.position[0].is_finite() && n.position[1].is_finite()) {
                return fail(format!("nodes[{i}].position: coordinates must be finite"));
            }
        }
        // topology-level constraints (unique ids, radios) surface here too
        self.build_topology()?;

        let node_exists = |id: u32| self.nodes.iter().any(|n| n.id == id);
        let mut flow_ids = std::collections::BTreeSet::new();
        for (i, f) in self.flows.iter().enumerate() {
            if !flow_ids.insert(f.id) {
                return fail(format!("flows[{i}].id: duplicate flow id {}", f.id));
            }
            if !node_exists(f.src) {
                return fail(format!("flows[{i}].src: unknown node {}", f.src));
            }
            if !node_exists(f.dst) {
                return fail(format!("flows[{i}].dst: unknown node {}", f.dst));
            }
            if f.src == f.dst {
                return fail(format!("flows[{i}].dst: must differ from src"));
            }
            if f.pkt_bytes == 0 {
                return fail(format!("flows[{i}].pkt_bytes: must be > 0"));
            }
            if f.pkt_bytes > self.payload_capacity() {
                return fail(format!(
                    "flows[{i}].pkt_bytes: {} exceeds mtu_bytes - header_bytes = {}",
                    f.pkt_bytes,
                    self.payload_capacity()
                ));
            }
            if !f.start_s.is_finite() || f.start_s < 0.0 {
                return fail(format!(
                    "flows[{i}].start_s: {} must be finite and >= 0",
                    f.start_s
                ));
            }
            if !f.stop_s.is_finite() || f.start_s >= f.stop_s {
                return fail(format!(
                    "flows[{i}].start_s: {} must be before stop_s {}",
                    f.start_s, f.stop_s
                ));
            }
            if f.stop_s > self.duration_s {
                return fail(format!(
                    "flows[{i}].stop_s: {} exceeds duration_s {}",
                    f.stop_s, self.duration_s
                ));
            }
            match f.kind {
                FlowKind::Cbr => {
                    match f.rate_pps {
                        Some(r) if r.is_finite() && r > 0.0 => {}
                        Some(r) => {
                            return fail(format!(
                                "flows[{i}].rate_pps: {r} must be finite and > 0"
                            ));
                        }
                        None => {
                            return fail(format!("flows[{i}].rate_pps: required for cbr flows"));
                        }
                    }
                    if f.window.is_some() || f.rto_initial_s.is_some() {
                        return fail(format!(
                            "flows[{i}].window/rto_initial_s: only valid for reliable flows"
                        ));
                    }
                }
                FlowKind::Reliable => {
                    if f.rate_pps.is_some() {
                        return fail(format!("flows[{i}].rate_pps: only valid for cbr flows"));
                    }
                    if f.window == Some(0) {
                        return fail(format!("flows[{i}].window: must be >= 1"));
                    }
                    if let Some(rto) = f.rto_initial_s {
                        if !rto.is_finite() || rto <= 0.0 {
                            return fail(format!(
                                "flows[{i}].rto_initial_s: {rto} must be finite and > 0"
                            ));
                        }
                    }
                }
            }
        }
        for (i, ev) in self.link_events.iter().enumerate() {
            if !node_exists(ev.a) {
                return fail(format!("link_events[{i}].a: unknown node {}", ev.a));
            }
            if !node_exists(ev.b) {
                return fail(format!("link_events[{i}].b: unknown node {}", ev.b));
            }
            if ev.a == ev.b {
                return fail(format!("link_events[{i}].b: must differ from a"));
            }
            if !(0.0..=self.duration_s).contains(&ev.at_s) {
                return fail(format!(
                    "link_events[{i}].at_s: {} outside [0, duration_s]",
                    ev.at_s
                ));
            }
        }
        Ok(())
    }

    pub fn build_topology(&self) -> Result<Topology, ScenarioError> {
        let nodes: Vec<NodeSpec> = self
            .nodes
            .iter()
            .map(|n| NodeSpec {
                id: NodeId(n.id),
                position: (n.position[0], n.position[1]),
                radios: n
                    .radios
                    .iter()
                    .map(|r| RadioSpec {
                        channel: ChannelId(r.channel),
                        rate_bps: r.rate_bps,
                    })
                    .collect(),
            })
            .collect();
        let mut topo = Topology::build(nodes, self.transmission_range_m)
            .map_err(|e| ScenarioError::Invalid(format!("nodes: {e}")))?;
        topo.set_loss_prob(self.link_loss_prob);
        Ok(topo)
    }
}

pub const PRESET_NAMES: &[&str] = &["paper-10node", "line-3", "grid-9"];

/// Built-in scenarios. `paper-10node` is the desk-scale comparison setup:
/// ten dual-radio nodes on a 2x5 grid with four CBR flows offering roughly
/// 1.5x the capacity of one channel.
pub fn preset(name: &str) -> Result<Scenario, ScenarioError> {
    let sc = match name {
        "paper-10node" => paper_10node(),
        "line-3" => line_3(),
        "grid-9" => grid_9(),
        other => return Err(ScenarioError::UnknownPreset(other.to_string())),
    };
    debug_assert!(sc.validate().is_ok());
    Ok(sc)
}

fn cbr(id: u32, src: u32, dst: u32, rate_pps: f64, start_s: f64, stop_s: f64) -> FlowDef {
    FlowDef {
        id,
        kind: FlowKind::Cbr,
        src,
        dst,
        pkt_bytes: 512,
        start_s,
        stop_s,
        rate_pps: Some(rate_pps),
        window: None,
        rto_initial_s: None,
    }
}

fn base(duration_s: f64, range_m: f64, nodes: Vec<NodeDef>, flows: Vec<FlowDef>) -> Scenario {
    Scenario {
        schema: SCHEMA_VERSION,
        duration_s,
        seed: 1,
        protocol: Protocol::Aal2r,
        mtu_bytes: 1500,
        header_bytes: 28,
        transmission_range_m: range_m,
        queue_capacity_pkts: 50,
        link_loss_prob: 0.0,
        series_bin_s: 1.0,
        gsr: GsrSection::default(),
        aal2r: Aal2rSection::default(),
        nodes,
        flows,
        link_events: Vec::new(),
    }
}

fn paper_10node() -> Scenario {
    // 2x5 grid, 100 m spacing, node id = row * 5 + col. Every node carries
    // two radios (channels 1 and 2) at 6 Mbit/s. The four corner-to-corner
    // CBR flows cross 4+4+5+5 = 18 hops in total; at 115 pps of 512-byte
    // packets the hop-weighted airtime demand is 115 * 18 * 540 * 8
    // = 8.94 Mbit/s, about 1.5x the 6 Mbit/s capacity of one channel.
    let nodes = (0..10u32)
        .map(|id| NodeDef {
            id,
            position: [100.0 * (id % 5) as f64, 100.0 * (id / 5) as f64],
            radios: vec![
                RadioDef {
                    channel: 1,
                    rate_bps: 6_000_000,
                },
                RadioDef {
                    channel: 2,
                    rate_bps: 6_000_000,
                },
            ],
        })
        .collect();
    let flows = vec![
        cbr(0, 0, 4, 115.0, 1.0, 59.0),
        cbr(1, 5, 9, 115.0, 1.0, 59.0),
        cbr(2, 0, 9, 115.0, 1.0, 59.0),
        cbr(3, 9, 0, 115.0, 1.0, 59.0),
    ];
    base(60.0, 120.0, nodes, flows)
}

fn line_3() -> Scenario {
    let nodes = (0..3u32)
        .map(|id| NodeDef {
            id,
            position: [100.0 * id as f64, 0.0],
            radios: vec![RadioDef {
                channel: 1,
                rate_bps: 6_000_000,
            }],
        })
        .collect();
    base(30.0, 120.0, nodes, vec![cbr(0, 0, 2, 100.0, 1.0, 25.0)])
}

fn grid_9() -> Scenario {
    let nodes = (0..9u32)
        .map(|id| NodeDef {
            id,
            position: [100.0 * (id % 3) as f64, 100.0 * (id / 3) as f64],
            radios: vec![RadioDef {
                channel: 1,
                rate_bps: 6_000_000,
            }],
        })
        .collect();
    let flows = vec![
        cbr(0, 0, 8, 200.0, 1.0, 55.0),
        cbr(1, 6, 2, 200.0, 1.0, 55.0),
    ];
    base(60.0, 120.0, nodes, flows)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        schema = 1
        duration_s = 10.0
        protocol = "gsr"
        transmission_range_m = 120.0

        [[nodes]]
        id = 0
        position = [0.0, 0.0]
        radios = [{ channel = 1 }]

        [[nodes]]
        id = 1
        position = [100.0, 0.0]
        radios = [{ channel = 1 }]

        [[flows]]
        id = 0
        kind = "cbr"
        src = 0
        dst = 1
        rate_pps = 10.0
        start_s = 1.0
        stop_s = 9.0
    "#;

    #[test]
    fn minimal_file_gets_defaults() {
        let sc = Scenario::from_toml(MINIMAL).unwrap();
        assert_eq!(sc.mtu_bytes, 1500);
        assert_eq!(sc.header_bytes, 28);
        assert_eq!(sc.queue_capacity_pkts, 50);
        assert_eq!(sc.seed, 1);
        assert_eq!(sc.nodes[0].radios[0].rate_bps, 6_000_000);
        assert_eq!(sc.flows[0].pkt_bytes, 512);
        assert_eq!(sc.gsr.update_interval_s, 1.0);
        assert_eq!(sc.aal2r.hold_time_s, 0.0);
    }

    #[test]
    fn unknown_protocol_names_the_field() {
        let text = MINIMAL.replace("\"gsr\"", "\"ospf\"");
        let err = Scenario::from_toml(&text).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("protocol"),
            "error should name the field: {msg}"
        );
    }

    #[test]
    fn oversized_packet_names_field_and_constraint() {
        let text = MINIMAL.replace(
            "rate_pps = 10.0",
            "rate_pps = 10.0\n        pkt_bytes = 1490",
        );
        let err = Scenario::from_toml(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pkt_bytes"), "{msg}");
        assert!(msg.contains("1472"), "{msg}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = format!("{MINIMAL}\nbogus_knob = 3\n");
        assert!(Scenario::from_toml(&text).is_err());
    }

    #[test]
    fn forwarding_knobs_come_from_the_file() {
        let text = format!(
            "{MINIMAL}\n[aal2r]\nqueue_priority = \"avg_age\"\nhold_time_s = 0.002\n\
             [gsr]\nupdate_interval_s = 0.25\n"
        );
        let sc = Scenario::from_toml(&text).unwrap();
        assert_eq!(sc.aal2r.queue_priority, QueuePriority::AvgAge);
        assert_eq!(sc.aal2r.hold_time_s, 0.002);
        assert_eq!(sc.gsr.update_interval_s, 0.25);
    }

    #[test]
    fn flow_referencing_missing_node_is_invalid() {
        let text = MINIMAL.replace("dst = 1", "dst = 7");
        let err = Scenario::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("unknown node 7"));
    }

    #[test]
    fn rate_required_for_cbr() {
        let text = MINIMAL.replace("rate_pps = 10.0\n", "");
        let err = Scenario::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("rate_pps"));
    }

    #[test]
    fn preset_paper_10node_shape() {
        let sc = preset("paper-10node").unwrap();
        assert_eq!(sc.nodes.len(), 10);
        assert_eq!(sc.flows[0].pkt_bytes, 512);
        assert_eq!(sc.duration_s, 60.0);
        assert_eq!(sc.flows.len(), 4);
        for n in &sc.nodes {
            assert_eq!(n.radios.len(), 2);
        }
        // hop-weighted airtime demand is ~1.5x one channel's 6 Mbit/s
        let topo = sc.build_topology().unwrap();
        let offered: f64 = sc
            .flows
            .iter()
            .map(|f| {
                let hops = topo
                    .hop_distance(crate::net::NodeId(f.src), crate::net::NodeId(f.dst))
                    .unwrap()
                    .unwrap() as f64;
                f.rate_pps.unwrap() * hops * (f.pkt_bytes + sc.header_bytes) as f64 * 8.0
            })
            .sum();
        let ratio = offered / 6_000_000.0;
        assert!((1.4..1.6).contains(&ratio), "offered/bottleneck = {ratio}");
    }

    #[test]
    fn preset_line3_is_three_collinear_single_channel_nodes() {
        let sc = preset("line-3").unwrap();
        assert_eq!(sc.nodes.len(), 3);
        assert!(sc.nodes.iter().all(|n| n.radios.len() == 1));
        assert!(sc.nodes.iter().all(|n| n.position[1] == 0.0));
    }

    #[test]
    fn unknown_preset_is_an_error() {
        assert!(matches!(
            preset("mesh-42"),
            Err(ScenarioError::UnknownPreset(_))
        ));
    }

    #[test]
    fn digest_is_stable_and_content_sensitive() {
        let a = Scenario::from_toml(MINIMAL).unwrap();
        let b = Scenario::from_toml(MINIMAL).unwrap();
        assert_eq!(a.digest(), b.digest());
        let mut c = Scenario::from_toml(MINIMAL).unwrap();
        c.seed = 2;
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn toml_round_trip_preserves_the_scenario() {
        let sc = preset("paper-10node").unwrap();
        let again = Scenario::from_toml(&sc.to_toml()).unwrap();
        assert_eq!(sc.digest(), again.digest());
    }
}
