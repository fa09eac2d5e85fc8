// SPDX-License-Identifier: Apache-2.0

//! Scenario files (TOML) and their validation.
//!
//! A scenario describes network segments behind gateways, the middlebox
//! pools of the cloud service, benign and attack traffic, scripted flows
//! and injected failures. See `scenarios/canonical.toml` for a commented
//! example.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::path::Path;

use edgeguard_core::flow::{proto, Subnet};
use edgeguard_core::middlebox::{
    DpiConfig, FirewallConfig, FirewallRule, IdsConfig, IdsSignature, MiddleboxConfig, RateCondition,
};
use edgeguard_core::{DeviceId, MatchPattern, Priority, Tick, TickWindow, Verdict};
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Parse(String),
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("{0}")]
    Rule(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ScenarioError {
    pub fn is_io(&self) -> bool {
        matches!(self, ScenarioError::Io { .. })
    }
}

fn d_one() -> u64 {
    1
}
fn d_true() -> bool {
    true
}
fn d_report_interval() -> u64 {
    50
}
fn d_instances() -> u32 {
    1
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum VerdictSpec {
    Allow,
    Drop,
}

impl From<VerdictSpec> for Verdict {
    fn from(v: VerdictSpec) -> Self {
        match v {
            VerdictSpec::Allow => Verdict::Allow,
            VerdictSpec::Drop => Verdict::Drop,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum PrioritySpec {
    Normal,
    High,
}

impl From<PrioritySpec> for Priority {
    fn from(p: PrioritySpec) -> Self {
        match p {
            PrioritySpec::Normal => Priority::Normal,
            PrioritySpec::High => Priority::High,
        }
    }
}

/// `"tcp"`, `"udp"`, `"icmp"` or a protocol number.
#[derive(Clone, Debug, Deserialize, PartialEq, Eq)]
#[serde(untagged)]
pub enum ProtocolSpec {
    Number(u8),
    Name(String),
}

impl ProtocolSpec {
    pub fn resolve(&self) -> Result<u8, String> {
        match self {
            ProtocolSpec::Number(n) => Ok(*n),
            ProtocolSpec::Name(s) => match s.to_ascii_lowercase().as_str() {
                "tcp" => Ok(proto::TCP),
                "udp" => Ok(proto::UDP),
                "icmp" => Ok(proto::ICMP),
                other => Err(format!("unknown protocol {other:?}")),
            },
        }
    }
}

/// Match pattern; omitted fields are wildcards.
#[derive(Clone, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct PatternSpec {
    pub src: Option<Ipv4Addr>,
    pub dst: Option<Ipv4Addr>,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub protocol: Option<ProtocolSpec>,
    pub device: Option<u16>,
}

impl PatternSpec {
    pub fn resolve(&self) -> Result<MatchPattern, String> {
        Ok(MatchPattern {
            src_addr: self.src,
            dst_addr: self.dst,
            src_port: self.src_port,
            dst_port: self.dst_port,
            protocol: self.protocol.as_ref().map(ProtocolSpec::resolve).transpose()?,
            device_id: self.device.map(DeviceId),
        })
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Firewall,
    Ids,
    Dpi,
}

#[derive(Clone, Debug, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    #[serde(default)]
    pub pattern: PatternSpec,
    pub verdict: VerdictSpec,
}

#[derive(Clone, Debug, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct SignatureSpec {
    #[serde(default)]
    pub pattern: PatternSpec,
    /// Rate condition: fire only above `max_flows` flows per source within
    /// `window` ticks.
    pub max_flows: Option<u32>,
    pub window: Option<u64>,
}

#[derive(Clone, Debug, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub id: u32,
    pub kind: PoolKind,
    #[serde(default = "d_instances")]
    pub instances: u32,
    /// Deploy a standby replica for every instance.
    #[serde(default)]
    pub replicas: bool,
    /// Firewall: allowlist every catalog server.
    #[serde(default)]
    pub allow_known_servers: bool,
    /// Firewall: extra allowlisted addresses.
    #[serde(default)]
    pub allow: Vec<Ipv4Addr>,
    #[serde(default, rename = "rule")]
    pub rules: Vec<RuleSpec>,
    #[serde(default, rename = "signature")]
    pub signatures: Vec<SignatureSpec>,
    #[serde(default)]
    pub banned_tags: Vec<u8>,
}

#[derive(Clone, Debug, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct HostSpec {
    pub device: u16,
    /// Traffic class name; `"default"` when omitted.
    pub class: Option<String>,
    /// Catalog indices this host talks to; all servers when omitted.
    pub servers: Option<Vec<u32>>,
}

#[derive(Clone, Debug, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ManualSpec {
    #[serde(default)]
    pub pattern: PatternSpec,
    pub verdict: VerdictSpec,
}

fn d_inbound() -> VerdictSpec {
    VerdictSpec::Drop
}
fn d_outbound() -> VerdictSpec {
    VerdictSpec::Allow
}

#[derive(Clone, Debug, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub name: String,
    pub subnet: String,
    pub hosts: Vec<HostSpec>,
    /// Traffic class name -> ordered pool ids. Must define `default`.
    pub chains: BTreeMap<String, Vec<u32>>,
    #[serde(default = "d_true")]
    pub share_data: bool,
    #[serde(default)]
    pub full_session_routing: bool,
    #[serde(default = "d_inbound")]
    pub default_inbound: VerdictSpec,
    #[serde(default = "d_outbound")]
    pub default_outbound: VerdictSpec,
    #[serde(default, rename = "manual")]
    pub manual: Vec<ManualSpec>,
}

#[derive(Clone, Debug, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSpec {
    pub distinct_targets: usize,
    pub window: u64,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        DetectorSpec { distinct_targets: 10, window: 50 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct BlacklistSpec {
    pub repeats: usize,
    pub window: u64,
    pub malformed: u32,
}

impl Default for BlacklistSpec {
    fn default() -> Self {
        BlacklistSpec { repeats: 5, window: 50, malformed: 3 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct CatalogSpec {
    pub servers: u32,
    /// Server `i` lives at `network + i + 1`.
    pub network: Ipv4Addr,
    /// Server `i` listens on `ports[i % ports.len()]`.
    pub ports: Vec<u16>,
}

impl Default for CatalogSpec {
    fn default() -> Self {
        CatalogSpec {
            servers: 32,
            network: Ipv4Addr::new(198, 51, 100, 0),
            ports: vec![443, 80],
        }
    }
}

impl CatalogSpec {
    pub fn server(&self, i: u32) -> (Ipv4Addr, u16) {
        let addr = Ipv4Addr::from(u32::from(self.network) + i + 1);
        (addr, self.ports[i as usize % self.ports.len()])
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BenignSpec {
    /// Remote nodes opening inbound flows to local hosts.
    pub external_nodes: u32,
    /// Node `i` lives at `external_network + i + 1`.
    pub external_network: Ipv4Addr,
    /// Node `i` always targets port `external_ports[i % len]`.
    pub external_ports: Vec<u16>,
    /// Inbound flows per node per tick at peak.
    pub external_rate: f64,
    /// Outbound flows per host per tick at peak.
    pub host_rate: f64,
    /// Length of one day in ticks; 0 disables the day/night cycle.
    pub diurnal_period: u64,
    /// Rate multiplier at the quietest point of the day.
    pub diurnal_trough: f64,
    /// Ticks whose rate multiplier is below this fraction of the peak form
    /// the low-activity windows.
    pub low_activity_threshold: f64,
    /// Explicit low-activity windows `[start, end]`, overriding the derived
    /// ones.
    pub low_activity: Option<Vec<[u64; 2]>>,
}

impl Default for BenignSpec {
    fn default() -> Self {
        BenignSpec {
            external_nodes: 20,
            external_network: Ipv4Addr::new(192, 0, 2, 0),
            external_ports: vec![22, 8080, 8443, 1883, 5683],
            external_rate: 0.02,
            host_rate: 0.1,
            diurnal_period: 0,
            diurnal_trough: 0.1,
            low_activity_threshold: 0.2,
            low_activity: None,
        }
    }
}

impl BenignSpec {
    /// Benign rate multiplier at `tick`, 1 at peak.
    pub fn multiplier(&self, tick: Tick) -> f64 {
        if self.diurnal_period == 0 {
            return 1.0;
        }
        let phase = (tick % self.diurnal_period) as f64 / self.diurnal_period as f64;
        let wave = (1.0 - (2.0 * std::f64::consts::PI * phase).cos()) / 2.0;
        self.diurnal_trough + (1.0 - self.diurnal_trough) * wave
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub zombies: u32,
    /// Zombie `j` lives at `network + j + 1`.
    #[serde(default = "d_zombie_net")]
    pub network: Ipv4Addr,
    pub ports_per_zombie: u32,
    #[serde(default = "d_probe_rate")]
    pub probe_rate: u32,
    /// Tick at which the swarm turns to each segment, by segment order.
    pub schedule: Vec<u64>,
    /// Each zombie joins a campaign up to this many ticks late.
    #[serde(default)]
    pub join_spread: u64,
}

fn d_zombie_net() -> Ipv4Addr {
    Ipv4Addr::new(100, 64, 0, 0)
}
fn d_probe_rate() -> u32 {
    5
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    #[default]
    Benign,
    Attack,
}

#[derive(Clone, Debug, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub tick: u64,
    pub segment: String,
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    #[serde(default = "d_tcp")]
    pub protocol: ProtocolSpec,
    pub device: u16,
    #[serde(default)]
    pub tag: u8,
    #[serde(default)]
    pub label: Label,
}

fn d_tcp() -> ProtocolSpec {
    ProtocolSpec::Number(proto::TCP)
}

#[derive(Clone, Debug, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct BasePolicySpec {
    #[serde(default)]
    pub pattern: PatternSpec,
    pub verdict: VerdictSpec,
    #[serde(default = "d_normal")]
    pub priority: PrioritySpec,
}

fn d_normal() -> PrioritySpec {
    PrioritySpec::Normal
}

fn d_flood() -> u32 {
    6
}

#[derive(Clone, Debug, Deserialize, PartialEq, Eq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FailureSpec {
    /// The primary cloud manager dies; the backup takes over.
    CssPrimary { tick: u64 },
    /// The segment's link to the cloud is down for `duration` ticks.
    LinkDown { tick: u64, segment: String, duration: u64 },
    /// Instance `index` of `pool` fails over to its replica.
    Middlebox { tick: u64, pool: u32, index: u32 },
    /// The segment gateway's certificate is revoked.
    Revoke { tick: u64, segment: String },
    /// `count` updates signed with a foreign key reach the segment gateway.
    RogueUpdate {
        tick: u64,
        segment: String,
        #[serde(default = "d_one_u32")]
        count: u32,
    },
    /// The segment gateway replays one signed request `count` times.
    ReplayFlood {
        tick: u64,
        segment: String,
        #[serde(default = "d_flood")]
        count: u32,
    },
}

fn d_one_u32() -> u32 {
    1
}

impl FailureSpec {
    pub fn tick(&self) -> u64 {
        match self {
            FailureSpec::CssPrimary { tick }
            | FailureSpec::LinkDown { tick, .. }
            | FailureSpec::Middlebox { tick, .. }
            | FailureSpec::Revoke { tick, .. }
            | FailureSpec::RogueUpdate { tick, .. }
            | FailureSpec::ReplayFlood { tick, .. } => *tick,
        }
    }

    fn segment(&self) -> Option<&str> {
        match self {
            FailureSpec::LinkDown { segment, .. }
            | FailureSpec::Revoke { segment, .. }
            | FailureSpec::RogueUpdate { segment, .. }
            | FailureSpec::ReplayFlood { segment, .. } => Some(segment),
            _ => None,
        }
    }
}

/// Scenario as written in the file.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub ticks: u64,
    #[serde(default = "d_one")]
    pub link_delay: u64,
    #[serde(default = "d_true")]
    pub collaboration: bool,
    /// Defaults to one round trip (`2 * link_delay`).
    pub response_timeout: Option<u64>,
    #[serde(default = "d_report_interval")]
    pub report_interval: u64,
    /// Run a hot-standby backup of the cloud manager.
    #[serde(default = "d_true")]
    pub replication: bool,
    #[serde(default)]
    pub detector: DetectorSpec,
    #[serde(default)]
    pub blacklist: BlacklistSpec,
    #[serde(default)]
    pub catalog: CatalogSpec,
    #[serde(default, rename = "pool")]
    pub pools: Vec<PoolSpec>,
    #[serde(rename = "segment")]
    pub segments: Vec<SegmentSpec>,
    #[serde(default)]
    pub benign: BenignSpec,
    pub attack: Option<AttackSpec>,
    #[serde(default, rename = "flow")]
    pub flows: Vec<FlowSpec>,
    #[serde(default, rename = "base_policy")]
    pub base_policies: Vec<BasePolicySpec>,
    #[serde(default, rename = "failure")]
    pub failures: Vec<FailureSpec>,
}

/// A segment with its references resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub subnet: Subnet,
    /// Address and device of every host, in file order.
    pub hosts: Vec<(Ipv4Addr, DeviceId)>,
}

/// A validated scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub segments: Vec<Segment>,
    pub low_activity: Vec<TickWindow>,
}

/// Locates the line of the `index`-th `[[table]]` header, 1-based.
fn table_line(source: &str, table: &str, index: usize) -> usize {
    let header = format!("[[{table}]]");
    source
        .lines()
        .enumerate()
        .filter(|(_, l)| l.trim() == header)
        .nth(index)
        .map_or(1, |(i, _)| i + 1)
}

fn parse_subnet(s: &str) -> Result<Subnet, String> {
    let (addr, len) = s.split_once('/').ok_or_else(|| format!("subnet {s:?} lacks a prefix length"))?;
    let addr: Ipv4Addr = addr.parse().map_err(|_| format!("bad subnet address {addr:?}"))?;
    let len: u8 = len.parse().map_err(|_| format!("bad prefix length {len:?}"))?;
    if len > 30 {
        return Err(format!("prefix length {len} leaves no room for hosts"));
    }
    let subnet = Subnet::new(addr, len);
    if subnet.network != addr {
        return Err(format!("{s} has host bits set"));
    }
    Ok(subnet)
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let source = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&source)
    }

    pub fn parse(source: &str) -> Result<Self, ScenarioError> {
        let spec: ScenarioSpec = toml::from_str(source).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        Self::validate(spec, source)
    }

    /// Checks a spec built in code (no source text to anchor errors to).
    pub fn from_spec(spec: ScenarioSpec) -> Result<Self, ScenarioError> {
        Self::validate(spec, "")
    }

    fn validate(spec: ScenarioSpec, source: &str) -> Result<Self, ScenarioError> {
        let top = |message: String| {
            if source.is_empty() {
                ScenarioError::Rule(message)
            } else {
                ScenarioError::Invalid { line: 1, message }
            }
        };
        let at = |table: &str, index: usize, message: String| {
            if source.is_empty() {
                ScenarioError::Rule(format!("{table} #{}: {message}", index + 1))
            } else {
                ScenarioError::Invalid { line: table_line(source, table, index), message }
            }
        };

        if spec.ticks == 0 {
            return Err(top("ticks must be positive".into()));
        }
        if spec.link_delay == 0 {
            return Err(top("link_delay must be at least 1 tick".into()));
        }
        if spec.report_interval == 0 {
            return Err(top("report_interval must be positive".into()));
        }
        if spec.detector.distinct_targets == 0 || spec.detector.window == 0 {
            return Err(top("detector thresholds must be positive".into()));
        }
        if spec.blacklist.window == 0 || spec.blacklist.malformed == 0 {
            return Err(top("blacklist thresholds must be positive".into()));
        }
        if spec.catalog.ports.is_empty() {
            return Err(top("catalog.ports must not be empty".into()));
        }
        if spec.segments.is_empty() {
            return Err(top("at least one [[segment]] is required".into()));
        }
        let b = &spec.benign;
        for (name, rate) in [("external_rate", b.external_rate), ("host_rate", b.host_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(top(format!("benign.{name} must lie in [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&b.diurnal_trough) {
            return Err(top("benign.diurnal_trough must lie in [0, 1]".into()));
        }
        if b.external_nodes > 0 && b.external_ports.is_empty() {
            return Err(top("benign.external_ports must not be empty".into()));
        }

        let mut pool_ids = BTreeSet::new();
        for (i, pool) in spec.pools.iter().enumerate() {
            if !pool_ids.insert(pool.id) {
                return Err(at("pool", i, format!("duplicate pool id {}", pool.id)));
            }
            if pool.instances == 0 {
                return Err(at("pool", i, "a pool needs at least one instance".into()));
            }
            for r in &pool.rules {
                r.pattern.resolve().map_err(|e| at("pool", i, e))?;
            }
            for s in &pool.signatures {
                s.pattern.resolve().map_err(|e| at("pool", i, e))?;
                if s.max_flows.is_some() != s.window.is_some() {
                    return Err(at("pool", i, "a rate condition needs both max_flows and window".into()));
                }
            }
        }

        let mut names = BTreeSet::new();
        let mut segments = Vec::new();
        let mut subnets: Vec<Subnet> = Vec::new();
        for (i, seg) in spec.segments.iter().enumerate() {
            if !names.insert(seg.name.as_str()) {
                return Err(at("segment", i, format!("duplicate segment name {:?}", seg.name)));
            }
            let subnet = parse_subnet(&seg.subnet).map_err(|e| at("segment", i, e))?;
            if subnets.iter().any(|s| s.contains(subnet.network) || subnet.contains(s.network)) {
                return Err(at("segment", i, format!("subnet {subnet} overlaps another segment")));
            }
            subnets.push(subnet);
            if seg.hosts.is_empty() {
                return Err(at("segment", i, "a segment needs at least one host".into()));
            }
            let capacity = (1u64 << (32 - subnet.prefix_len)) - 2;
            if seg.hosts.len() as u64 > capacity {
                return Err(at("segment", i, format!("{} hosts do not fit in {subnet}", seg.hosts.len())));
            }
            if !seg.chains.contains_key("default") {
                return Err(at("segment", i, "chains must define a \"default\" class".into()));
            }
            for (class, pools) in &seg.chains {
                if pools.is_empty() {
                    return Err(at("segment", i, format!("chain {class:?} is empty")));
                }
                let mut seen = BTreeSet::new();
                for p in pools {
                    if !pool_ids.contains(p) {
                        return Err(at("segment", i, format!("chain {class:?} names unknown pool {p}")));
                    }
                    if !seen.insert(p) {
                        return Err(at("segment", i, format!("chain {class:?} names pool {p} twice")));
                    }
                }
            }
            let mut devices = BTreeMap::new();
            let mut hosts = Vec::new();
            for (h, host) in seg.hosts.iter().enumerate() {
                let class = host.class.as_deref().unwrap_or("default");
                if !seg.chains.contains_key(class) {
                    return Err(at("segment", i, format!("host {h} uses undefined class {class:?}")));
                }
                if let Some(prev) = devices.insert(host.device, class) {
                    if prev != class {
                        return Err(at(
                            "segment",
                            i,
                            format!("device {} is listed in classes {prev:?} and {class:?}", host.device),
                        ));
                    }
                }
                if let Some(servers) = &host.servers {
                    if servers.is_empty() || servers.iter().any(|&s| s >= spec.catalog.servers) {
                        return Err(at("segment", i, format!("host {h} lists servers outside the catalog")));
                    }
                } else if spec.catalog.servers == 0 && spec.benign.host_rate > 0.0 {
                    return Err(at("segment", i, "hosts need catalog servers to talk to".into()));
                }
                hosts.push((subnet.host(h as u32 + 1), DeviceId(host.device)));
            }
            for m in &seg.manual {
                m.pattern.resolve().map_err(|e| at("segment", i, e))?;
            }
            segments.push(Segment { name: seg.name.clone(), subnet, hosts });
        }

        if let Some(attack) = &spec.attack {
            if attack.schedule.len() > spec.segments.len() {
                return Err(top(format!(
                    "attack.schedule has {} entries for {} segments",
                    attack.schedule.len(),
                    spec.segments.len()
                )));
            }
            if attack.probe_rate == 0 {
                return Err(top("attack.probe_rate must be positive".into()));
            }
            if attack.ports_per_zombie > 65535 {
                return Err(top("attack.ports_per_zombie cannot exceed 65535".into()));
            }
        }

        for (i, flow) in spec.flows.iter().enumerate() {
            if !names.contains(flow.segment.as_str()) {
                return Err(at("flow", i, format!("unknown segment {:?}", flow.segment)));
            }
            flow.protocol.resolve().map_err(|e| at("flow", i, e))?;
            if flow.tick >= spec.ticks {
                return Err(at("flow", i, format!("tick {} is past the end of the run", flow.tick)));
            }
        }
        for (i, p) in spec.base_policies.iter().enumerate() {
            p.pattern.resolve().map_err(|e| at("base_policy", i, e))?;
        }

        let mut css_failures = 0;
        for (i, f) in spec.failures.iter().enumerate() {
            if let Some(seg) = f.segment() {
                if !names.contains(seg) {
                    return Err(at("failure", i, format!("unknown segment {seg:?}")));
                }
            }
            match f {
                FailureSpec::CssPrimary { .. } => {
                    css_failures += 1;
                    if !spec.replication {
                        return Err(at("failure", i, "primary failure needs replication = true".into()));
                    }
                    if css_failures > 1 {
                        return Err(at("failure", i, "only one primary failure is supported".into()));
                    }
                }
                FailureSpec::Middlebox { pool, index, .. } => {
                    let Some(p) = spec.pools.iter().find(|p| p.id == *pool) else {
                        return Err(at("failure", i, format!("unknown pool {pool}")));
                    };
                    if *index >= p.instances {
                        return Err(at("failure", i, format!("pool {pool} has no instance {index}")));
                    }
                }
                _ => {}
            }
        }

        let low_activity = match &spec.benign.low_activity {
            Some(windows) => {
                for w in windows {
                    if w[0] > w[1] {
                        return Err(top(format!("low-activity window {w:?} ends before it starts")));
                    }
                }
                windows.iter().map(|w| TickWindow::new(w[0], w[1])).collect()
            }
            None => derive_low_activity(&spec.benign, spec.ticks),
        };

        Ok(Scenario { spec, segments, low_activity })
    }

    pub fn segment_index(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    pub fn response_timeout(&self) -> Tick {
        self.spec.response_timeout.unwrap_or(2 * self.spec.link_delay)
    }

    /// The concrete configuration of one pool's instances.
    pub fn middlebox_config(&self, pool: &PoolSpec) -> MiddleboxConfig {
        let resolve = |p: &PatternSpec| p.resolve().expect("validated");
        match pool.kind {
            PoolKind::Firewall => {
                let mut allowlist: BTreeSet<Ipv4Addr> = pool.allow.iter().copied().collect();
                if pool.allow_known_servers {
                    allowlist.extend((0..self.spec.catalog.servers).map(|i| self.spec.catalog.server(i).0));
                }
                MiddleboxConfig::Firewall(FirewallConfig {
                    allowlist,
                    rules: pool
                        .rules
                        .iter()
                        .map(|r| FirewallRule { pattern: resolve(&r.pattern), verdict: r.verdict.into() })
                        .collect(),
                })
            }
            PoolKind::Ids => MiddleboxConfig::Ids(IdsConfig {
                signatures: pool
                    .signatures
                    .iter()
                    .map(|s| IdsSignature {
                        pattern: resolve(&s.pattern),
                        rate: s.max_flows.zip(s.window).map(|(max_flows, window)| RateCondition { max_flows, window }),
                    })
                    .collect(),
            }),
            PoolKind::Dpi => MiddleboxConfig::Dpi(DpiConfig { banned: pool.banned_tags.iter().copied().collect() }),
        }
    }
}

/// Maximal runs of ticks whose benign multiplier is below the threshold.
fn derive_low_activity(benign: &BenignSpec, ticks: u64) -> Vec<TickWindow> {
    if benign.diurnal_period == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut start = None;
    for t in 0..ticks {
        let quiet = benign.multiplier(t) < benign.low_activity_threshold;
        match (quiet, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push(TickWindow::new(s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(TickWindow::new(s, ticks - 1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 1
ticks = 10

[[pool]]
id = 1
kind = "firewall"

[[segment]]
name = "home"
subnet = "10.0.1.0/24"
hosts = [{ device = 1 }]
chains = { default = [1] }
"#;

    #[test]
    fn minimal_parses_with_defaults() {
        let s = Scenario::parse(MINIMAL).unwrap();
        assert_eq!(s.spec.link_delay, 1);
        assert_eq!(s.response_timeout(), 2);
        assert_eq!(s.segments[0].hosts, vec![(Ipv4Addr::new(10, 0, 1, 1), DeviceId(1))]);
        assert!(s.low_activity.is_empty());
    }

    #[test]
    fn unknown_pool_is_line_anchored() {
        let src = MINIMAL.replace("default = [1]", "default = [9]");
        let err = Scenario::parse(&src).unwrap_err();
        let line = src.lines().position(|l| l.trim() == "[[segment]]").unwrap() + 1;
        assert!(matches!(err, ScenarioError::Invalid { line: l, .. } if l == line), "{err}");
        assert!(err.to_string().contains("unknown pool 9"));
    }

    #[test]
    fn syntax_error_mentions_line() {
        let err = Scenario::parse("seed = 1\nticks = = 3\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn diurnal_windows_cover_the_trough() {
        let benign = BenignSpec { diurnal_period: 100, ..Default::default() };
        let w = derive_low_activity(&benign, 200);
        assert!(!w.is_empty());
        for win in &w {
            for t in win.start..=win.end {
                assert!(benign.multiplier(t) < 0.2);
            }
        }
        assert!(w.iter().any(|win| win.contains(0)));
        assert!(!w.iter().any(|win| win.contains(50)));
    }
}
