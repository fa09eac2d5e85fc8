// SPDX-License-Identifier: Apache-2.0

//! Deterministic discrete-event simulation.
//!
//! Gateways and the cloud service exchange encoded frames through a single
//! event queue ordered by `(tick, insertion)`. Each tick runs, in order:
//! failure injections, link restorations, flow arrivals and message
//! deliveries, the cloud's scan detection and dissemination, gateway
//! timeouts, periodic sensor reports, and finally the metrics snapshot.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use edgeguard_core::cloud::{
    self, AnalyticsSummary, BasePolicy, BlacklistEvent, CloudConfig, CloudService, Detection,
    ReplicationError, Role, TrafficClass, UserProfile,
};
use edgeguard_core::gateway::{
    CssLink, FlowDecision, Gateway, GatewayConfig, ReleaseCause, Released,
};
use edgeguard_core::middlebox::{InstanceId, MiddleboxManager, PoolId};
use edgeguard_core::poldb::DefaultVerdicts;
use edgeguard_core::trust::{CertificateAuthority, Keypair, SubjectId};
use edgeguard_core::wire::{self, AnalysisRequest, MessageType, PolicyUpdate, UpdateTier};
use edgeguard_core::{
    BoxId, FlowMetadata, MatchPattern, PolicyId, Priority, SecurityPolicy, Tick, TickWindow, Verdict,
};

use crate::metrics::{MetricsRow, MetricsSeries};
use crate::scenario::{FailureSpec, Label, Scenario};
use crate::traffic::{self, Arrival};

/// Source address gateways see on frames from the cloud service.
pub const CSS_ADDR: Ipv4Addr = Ipv4Addr::new(203, 0, 113, 10);
/// Source address of injected rogue updates.
pub const ROGUE_ADDR: Ipv4Addr = Ipv4Addr::new(203, 0, 113, 66);

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("replication: {0}")]
    Replication(#[from] ReplicationError),
}

pub fn box_of(segment: usize) -> BoxId {
    BoxId(segment as u32 + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Local,
    Analyzed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Local,
    Response,
    Timeout,
}

/// What happened to one arrival.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowRecord {
    pub arrival: Arrival,
    pub route: Route,
    pub verdict: Option<Verdict>,
    pub decided_at: Option<Tick>,
    pub decision: Option<Decision>,
}

/// An update frame the cloud put on the wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmissionRecord {
    pub tick: Tick,
    pub box_id: BoxId,
    pub seq: u64,
    pub tier: UpdateTier,
    pub policies: Vec<PolicyId>,
}

/// Any frame the cloud sent to a gateway.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SendRecord {
    pub tick: Tick,
    pub box_id: BoxId,
    pub kind: MessageType,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SecurityCounters {
    pub rogue_injected: u64,
    pub rogue_rejected: u64,
    pub rogue_accepted: u64,
    pub replayed_requests: u64,
    pub failover_tick: Option<Tick>,
}

pub struct RunOutput {
    pub metrics: MetricsSeries,
    pub flows: Vec<FlowRecord>,
    pub emissions: Vec<EmissionRecord>,
    pub sends: Vec<SendRecord>,
    pub security: SecurityCounters,
    pub detections: Vec<Detection>,
    pub blacklist: Vec<BlacklistEvent>,
    pub analytics: AnalyticsSummary,
    pub css: CloudService,
    pub gateways: Vec<Gateway>,
}

impl RunOutput {
    pub fn csv(&self) -> Vec<u8> {
        self.metrics.to_csv()
    }
}

#[derive(Debug)]
enum Event {
    Arrival(usize),
    ToCss { segment: usize, frame: Vec<u8> },
    ToGateway { segment: usize, frame: Vec<u8>, source: Ipv4Addr, rogue: bool },
}

#[derive(Clone, Copy, Default)]
struct Tally {
    /// received, analyzed, dropped locally, allowed locally
    attack: [u64; 4],
    benign: [u64; 4],
    update_bytes: u64,
}

struct Simulation<'a> {
    sc: &'a Scenario,
    now: Tick,
    css: CloudService,
    backup: Option<CloudService>,
    gateways: Vec<Gateway>,
    box_keys: Vec<Keypair>,
    foreign: Keypair,
    instances: BTreeMap<(u32, u32), InstanceId>,
    queue: BTreeMap<(Tick, u64), Event>,
    next_seq: u64,
    link_down_until: Vec<Option<Tick>>,
    arrivals: Vec<Arrival>,
    flows: Vec<FlowRecord>,
    parked: BTreeMap<(usize, u32), usize>,
    tally: Vec<Tally>,
    requests: Vec<u64>,
    rows: Vec<MetricsRow>,
    emissions: Vec<EmissionRecord>,
    sends: Vec<SendRecord>,
    security: SecurityCounters,
}

/// Runs a validated scenario to completion.
pub fn run_scenario(sc: &Scenario) -> Result<RunOutput, SimError> {
    let mut sim = Simulation::new(sc)?;
    for now in 0..sc.spec.ticks {
        sim.step(now)?;
    }
    Ok(sim.finish())
}

/// Runs the scenario twice and compares the metrics CSV byte for byte.
pub fn replay_check(sc: &Scenario) -> Result<bool, SimError> {
    let a = run_scenario(sc)?.csv();
    let b = run_scenario(sc)?.csv();
    Ok(a == b)
}

fn setup_err(e: impl std::fmt::Display) -> SimError {
    SimError::Setup(e.to_string())
}

impl<'a> Simulation<'a> {
    fn new(sc: &'a Scenario) -> Result<Self, SimError> {
        let spec = &sc.spec;
        let mut ca = CertificateAuthority::from_u64(spec.seed);
        let (css_keys, css_cert) = ca.register(SubjectId(0), 0).map_err(setup_err)?;

        let mut mgr = MiddleboxManager::new();
        let mut instances = BTreeMap::new();
        let mut pools: Vec<_> = spec.pools.iter().collect();
        pools.sort_by_key(|p| p.id);
        for pool in &pools {
            let config = sc.middlebox_config(pool);
            for index in 0..pool.instances {
                instances.insert((pool.id, index), mgr.deploy(PoolId(pool.id), config.clone()));
            }
        }
        for pool in pools.iter().filter(|p| p.replicas) {
            for index in 0..pool.instances {
                mgr.deploy_replica(instances[&(pool.id, index)]).map_err(setup_err)?;
            }
        }

        let config = CloudConfig {
            collaboration: spec.collaboration,
            scan: cloud::ScanThresholds {
                distinct_targets: spec.detector.distinct_targets,
                window: spec.detector.window,
            },
            abuse: cloud::AbuseThresholds {
                repeats: spec.blacklist.repeats,
                window: spec.blacklist.window,
                malformed: spec.blacklist.malformed,
            },
            low_activity: sc.low_activity.clone(),
            base_policies: spec
                .base_policies
                .iter()
                .map(|p| BasePolicy {
                    pattern: p.pattern.resolve().expect("validated"),
                    verdict: p.verdict.into(),
                    priority: p.priority.into(),
                })
                .collect(),
        };
        let mut css = CloudService::new(config.clone(), Role::Primary, css_keys.clone(), ca.anchor(), mgr.clone());
        let mut backup = spec
            .replication
            .then(|| CloudService::new(config, Role::Backup, css_keys, ca.anchor(), mgr));

        let mut gateways = Vec::new();
        let mut box_keys = Vec::new();
        for (s, seg) in sc.segments.iter().enumerate() {
            let seg_spec = &spec.segments[s];
            let box_id = box_of(s);
            let (keys, cert) = ca.register(SubjectId(box_id.0), 0).map_err(setup_err)?;

            let class_ids: BTreeMap<&str, TrafficClass> = seg_spec
                .chains
                .keys()
                .enumerate()
                .map(|(i, name)| (name.as_str(), TrafficClass(i as u16)))
                .collect();
            let profile = UserProfile {
                box_id,
                local_net: seg.subnet,
                class_map: seg_spec
                    .hosts
                    .iter()
                    .map(|h| {
                        let class = h.class.as_deref().unwrap_or("default");
                        (edgeguard_core::DeviceId(h.device), class_ids[class])
                    })
                    .collect(),
                default_class: class_ids["default"],
                chains: seg_spec
                    .chains
                    .iter()
                    .map(|(name, pools)| (class_ids[name.as_str()], pools.iter().map(|&p| PoolId(p)).collect()))
                    .collect(),
                share_data: seg_spec.share_data,
                full_session_routing: seg_spec.full_session_routing,
            };
            css.register_box(profile.clone(), cert).map_err(setup_err)?;
            if let Some(b) = backup.as_mut() {
                b.register_box(profile, cert).map_err(setup_err)?;
            }

            let mut gw_config = GatewayConfig::new(box_id, seg.subnet);
            gw_config.defaults = DefaultVerdicts {
                inbound: seg_spec.default_inbound.into(),
                outbound: seg_spec.default_outbound.into(),
            };
            gw_config.response_timeout = sc.response_timeout();
            let mut gw = Gateway::new(gw_config, keys.clone(), ca.anchor(), css_cert);
            for m in &seg_spec.manual {
                gw.add_manual_policy(m.pattern.resolve().expect("validated"), m.verdict.into(), 0);
            }
            gateways.push(gw);
            box_keys.push(keys);
        }

        let n = sc.segments.len();
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&spec.seed.to_le_bytes());
        Ok(Simulation {
            sc,
            now: 0,
            css,
            backup,
            gateways,
            box_keys,
            foreign: Keypair::derive(&seed, b"edgeguard/foreign", 0),
            instances,
            queue: BTreeMap::new(),
            next_seq: 0,
            link_down_until: vec![None; n],
            arrivals: traffic::generate(sc),
            flows: Vec::new(),
            parked: BTreeMap::new(),
            tally: vec![Tally::default(); n],
            requests: vec![0; n],
            rows: Vec::new(),
            emissions: Vec::new(),
            sends: Vec::new(),
            security: SecurityCounters::default(),
        })
    }

    fn schedule(&mut self, tick: Tick, event: Event) {
        self.queue.insert((tick, self.next_seq), event);
        self.next_seq += 1;
    }

    fn delay(&self) -> Tick {
        self.sc.spec.link_delay
    }

    fn step(&mut self, now: Tick) -> Result<(), SimError> {
        self.now = now;
        let failures: Vec<FailureSpec> =
            self.sc.spec.failures.iter().filter(|f| f.tick() == now).cloned().collect();
        for f in failures {
            self.inject(&f)?;
        }
        for s in 0..self.gateways.len() {
            if self.link_down_until[s].is_some_and(|t| t <= now) {
                self.link_down_until[s] = None;
                self.gateways[s].set_link(CssLink::Connected);
            }
        }

        while self.flows.len() < self.arrivals.len() && self.arrivals[self.flows.len()].tick == now {
            let idx = self.flows.len();
            self.flows.push(FlowRecord {
                arrival: self.arrivals[idx],
                route: Route::Local,
                verdict: None,
                decided_at: None,
                decision: None,
            });
            self.schedule(now, Event::Arrival(idx));
        }
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 != now {
                break;
            }
            let event = entry.remove();
            self.handle(event)?;
        }

        self.css.tick(now);
        self.flush_css()?;

        for s in 0..self.gateways.len() {
            for released in self.gateways[s].expire(now) {
                self.release(s, released);
            }
        }

        let interval = self.sc.spec.report_interval;
        if (now + 1).is_multiple_of(interval) {
            let window = TickWindow::new((now + 1).saturating_sub(interval), now);
            for s in 0..self.gateways.len() {
                self.gateways[s].emit_sensor_report(window);
                self.flush_gateway(s);
            }
        }

        for (s, seg) in self.sc.segments.iter().enumerate() {
            let t = std::mem::take(&mut self.tally[s]);
            self.rows.push(MetricsRow {
                segment: seg.name.clone(),
                tick: now,
                attack_received: t.attack[0],
                attack_analyzed: t.attack[1],
                attack_dropped_local: t.attack[2],
                attack_allowed: t.attack[3],
                benign_received: t.benign[0],
                benign_analyzed: t.benign[1],
                benign_dropped_local: t.benign[2],
                benign_allowed: t.benign[3],
                css_requests_cumulative: self.requests[s],
                update_bytes: t.update_bytes,
            });
        }
        Ok(())
    }

    fn count(&mut self, segment: usize, label: Label, slot: usize) {
        let t = &mut self.tally[segment];
        let row = match label {
            Label::Attack => &mut t.attack,
            Label::Benign => &mut t.benign,
        };
        row[slot] += 1;
    }

    fn handle(&mut self, event: Event) -> Result<(), SimError> {
        let now = self.now;
        match event {
            Event::Arrival(idx) => {
                let a = self.arrivals[idx];
                self.count(a.segment, a.label, 0);
                match self.gateways[a.segment].process_flow(a.flow, a.tag, now) {
                    FlowDecision::Verdict(v) => {
                        self.count(a.segment, a.label, if v.is_drop() { 2 } else { 3 });
                        let rec = &mut self.flows[idx];
                        rec.verdict = Some(v);
                        rec.decided_at = Some(now);
                        rec.decision = Some(Decision::Local);
                    }
                    FlowDecision::CloudPending(req) => {
                        self.count(a.segment, a.label, 1);
                        self.requests[a.segment] += 1;
                        self.flows[idx].route = Route::Analyzed;
                        self.parked.insert((a.segment, req.request_id), idx);
                    }
                }
                self.flush_gateway(a.segment);
            }
            Event::ToCss { segment, frame } => {
                if let Some(up) = self.link_down_until[segment] {
                    self.schedule(up, Event::ToCss { segment, frame });
                    return Ok(());
                }
                // Rejections are part of the experiment; the cloud logs them.
                let _ = self.css.handle_frame(box_of(segment), &frame, now);
                self.flush_css()?;
            }
            Event::ToGateway { segment, frame, source, rogue } => {
                if let Some(up) = self.link_down_until[segment] {
                    self.schedule(up, Event::ToGateway { segment, frame, source, rogue });
                    return Ok(());
                }
                let kind = wire::decode_frame(&frame).map(|r| r.kind);
                match kind {
                    Ok(MessageType::Response) => {
                        if let Ok(released) = self.gateways[segment].on_response(&frame, source, now) {
                            self.release(segment, released);
                        }
                    }
                    Ok(MessageType::Update) => {
                        self.tally[segment].update_bytes += frame.len() as u64;
                        let ok = self.gateways[segment].receive_update(&frame, source, now).is_ok();
                        if rogue {
                            if ok {
                                self.security.rogue_accepted += 1;
                            } else {
                                self.security.rogue_rejected += 1;
                            }
                        }
                    }
                    _ => {}
                }
                self.flush_gateway(segment);
            }
        }
        Ok(())
    }

    fn release(&mut self, segment: usize, released: Released) {
        let Some(idx) = self.parked.remove(&(segment, released.request_id)) else {
            return;
        };
        let rec = &mut self.flows[idx];
        rec.verdict = Some(released.verdict);
        rec.decided_at = Some(self.now);
        rec.decision = Some(match released.cause {
            ReleaseCause::Response => Decision::Response,
            ReleaseCause::Timeout => Decision::Timeout,
        });
    }

    fn flush_gateway(&mut self, segment: usize) {
        let at = self.now + self.delay();
        for out in self.gateways[segment].drain_outbox() {
            self.schedule(at, Event::ToCss { segment, frame: out.0 });
        }
    }

    /// Replicates the cloud's journal to the backup, then ships its frames.
    fn flush_css(&mut self) -> Result<(), SimError> {
        let records = self.css.drain_replication();
        if let Some(b) = self.backup.as_mut() {
            for r in &records {
                b.apply_replication(r)?;
            }
        }
        let at = self.now + self.delay();
        for out in self.css.drain_outbox() {
            self.sends.push(SendRecord { tick: self.now, box_id: out.to, kind: out.kind });
            if out.kind == MessageType::Update {
                let update = wire::decode_frame(&out.frame)
                    .and_then(|raw| PolicyUpdate::decode(raw.payload))
                    .expect("cloud emits well-formed updates");
                self.emissions.push(EmissionRecord {
                    tick: self.now,
                    box_id: update.box_id,
                    seq: update.seq,
                    tier: update.tier,
                    policies: update.policies.iter().map(|p| p.id).collect(),
                });
            }
            let segment = out.to.0 as usize - 1;
            self.schedule(at, Event::ToGateway { segment, frame: out.frame, source: CSS_ADDR, rogue: false });
        }
        Ok(())
    }

    fn inject(&mut self, failure: &FailureSpec) -> Result<(), SimError> {
        let now = self.now;
        let seg = |name: &str| self.sc.segment_index(name).expect("validated");
        match failure {
            FailureSpec::CssPrimary { .. } => {
                let backup = self.backup.take().ok_or_else(|| setup_err("no backup to fail over to"))?;
                self.css = cloud::replicate_and_failover(&self.css, backup)?;
                self.security.failover_tick = Some(now);
            }
            FailureSpec::LinkDown { segment, duration, .. } => {
                let s = seg(segment);
                let until = now + duration;
                self.link_down_until[s] = Some(self.link_down_until[s].map_or(until, |t| t.max(until)));
                self.gateways[s].set_link(CssLink::Disconnected);
            }
            FailureSpec::Middlebox { pool, index, .. } => {
                let id = self.instances[&(*pool, *index)];
                let _ = self.css.fail_middlebox(id);
                self.flush_css()?;
            }
            FailureSpec::Revoke { segment, .. } => {
                let _ = self.css.revoke(box_of(seg(segment)), now);
                self.flush_css()?;
            }
            FailureSpec::RogueUpdate { segment, count, .. } => {
                let s = seg(segment);
                for k in 0..u64::from(*count) {
                    let policy = SecurityPolicy::css(
                        PolicyId(u64::MAX - k),
                        MatchPattern::ANY,
                        Verdict::Allow,
                        Priority::High,
                        now,
                    );
                    let update = PolicyUpdate {
                        box_id: box_of(s),
                        seq: u64::MAX - k,
                        tier: UpdateTier::High,
                        policies: vec![policy],
                    };
                    let foreign = &self.foreign;
                    let frame = wire::encode_frame(MessageType::Update, &update.encode(), |m| foreign.sign(m));
                    self.security.rogue_injected += 1;
                    self.schedule(now + self.delay(), Event::ToGateway { segment: s, frame, source: ROGUE_ADDR, rogue: true });
                }
            }
            FailureSpec::ReplayFlood { segment, count, .. } => {
                let s = seg(segment);
                let (host, device) = self.sc.segments[s].hosts[0];
                let (server, port) = self.sc.spec.catalog.server(0);
                let flow = FlowMetadata::tcp(host, 40000, server, port, device);
                let req = AnalysisRequest::new(box_of(s), u32::MAX, flow, 0);
                let keys = &self.box_keys[s];
                let frame = wire::encode_frame(MessageType::Request, &wire::encode_request(&req), |m| keys.sign(m));
                for _ in 0..*count {
                    self.security.replayed_requests += 1;
                    self.schedule(now + self.delay(), Event::ToCss { segment: s, frame: frame.clone() });
                }
            }
        }
        Ok(())
    }

    fn finish(self) -> RunOutput {
        RunOutput {
            metrics: MetricsSeries { rows: self.rows },
            flows: self.flows,
            emissions: self.emissions,
            sends: self.sends,
            security: self.security,
            detections: self.css.detections().to_vec(),
            blacklist: self.css.blacklist_events().to_vec(),
            analytics: self.css.analytics().clone(),
            css: self.css,
            gateways: self.gateways,
        }
    }
}
