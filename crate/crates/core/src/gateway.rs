// SPDX-License-Identifier: Apache-2.0

//! The edge gateway.
//!
//! For each new flow the gateway consults its policy database. A hit is
//! enforced immediately. A miss is sent to the cloud service as a 27-byte
//! analysis request and the flow is parked until the signed response comes
//! back, or until the response timeout fires, in which case the offline
//! default applies. While the cloud link is down, misses get the default
//! verdict in the same tick.
//!
//! Gateways only ever talk to the cloud service: every outbound frame is a
//! [`ToCss`].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::net::Ipv4Addr;

use thiserror::Error;

use crate::flow::{BoxId, DeviceId, FlowMetadata, MatchPattern, Subnet, Verdict};
use crate::poldb::{DefaultVerdicts, Lookup, PolicyDb, UpdateOutcome};
use crate::policy::{PolicyId, SecurityPolicy};
use crate::trust::{Certificate, Keypair, TrustAnchor};
use crate::wire::{
    self, AnalysisRequest, AnalysisResponse, DeviceActivity, MessageType, PolicyUpdate, RogueReport,
    SensorReport, SuspiciousSighting, WireError,
};
use crate::{Tick, TickWindow};

/// Ticks a parked flow waits for the cloud before the default applies.
pub const DEFAULT_RESPONSE_TIMEOUT: Tick = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CssLink {
    Connected,
    Disconnected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    FlowAllowed,
    FlowDropped,
    CloudRequested,
    UpdateApplied,
    UpdateRejected,
    SuspiciousSource(Ipv4Addr),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GatewayEvent {
    pub tick: Tick,
    pub kind: EventKind,
    pub flow: Option<FlowMetadata>,
}

#[derive(Clone, Debug)]
pub struct GatewayConfig {
    pub box_id: BoxId,
    pub local_net: Subnet,
    pub defaults: DefaultVerdicts,
    pub response_timeout: Tick,
}

impl GatewayConfig {
    pub fn new(box_id: BoxId, local_net: Subnet) -> Self {
        GatewayConfig {
            box_id,
            local_net,
            defaults: DefaultVerdicts::default(),
            response_timeout: DEFAULT_RESPONSE_TIMEOUT,
        }
    }
}

/// Outcome of [`Gateway::process_flow`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowDecision {
    /// Decided locally, from the policy database or the offline default.
    Verdict(Verdict),
    /// Parked; the request has been queued for the cloud.
    CloudPending(AnalysisRequest),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReleaseCause {
    Response,
    Timeout,
}

/// A parked flow that has received its verdict.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Released {
    pub request_id: u32,
    pub flow: FlowMetadata,
    pub verdict: Verdict,
    pub cause: ReleaseCause,
}

/// A frame addressed to the cloud service, the gateway's only peer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToCss(pub Vec<u8>);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("no pending request {0}")]
    UnknownRequestId(u32),
    #[error("signature does not verify against the registered cloud service")]
    BadSignature,
    #[error("malformed frame: {0}")]
    MalformedFrame(#[from] WireError),
    #[error("message addressed to {0}")]
    WrongRecipient(BoxId),
    #[error("response policy does not match the parked flow")]
    PolicyMismatch,
}

#[derive(Clone, Copy, Debug)]
struct Parked {
    flow: FlowMetadata,
    sent_at: Tick,
}

#[derive(Clone, Debug)]
pub struct Gateway {
    config: GatewayConfig,
    keys: Keypair,
    anchor: TrustAnchor,
    css_cert: Certificate,
    db: PolicyDb,
    link: CssLink,
    pending: BTreeMap<u32, Parked>,
    next_request_id: u32,
    next_manual_id: u64,
    log: Vec<GatewayEvent>,
    outbox: Vec<ToCss>,
}

impl Gateway {
    pub fn new(config: GatewayConfig, keys: Keypair, anchor: TrustAnchor, css_cert: Certificate) -> Self {
        let db = PolicyDb::with_defaults(config.defaults);
        Gateway {
            config,
            keys,
            anchor,
            css_cert,
            db,
            link: CssLink::Connected,
            pending: BTreeMap::new(),
            next_request_id: 0,
            next_manual_id: 1,
            log: Vec::new(),
            outbox: Vec::new(),
        }
    }

    pub fn box_id(&self) -> BoxId {
        self.config.box_id
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn db(&self) -> &PolicyDb {
        &self.db
    }

    pub fn log(&self) -> &[GatewayEvent] {
        &self.log
    }

    pub fn link(&self) -> CssLink {
        self.link
    }

    pub fn set_link(&mut self, link: CssLink) {
        self.link = link;
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn drain_outbox(&mut self) -> Vec<ToCss> {
        core::mem::take(&mut self.outbox)
    }

    /// Replaces the policy database with one restored from a snapshot, as
    /// after a reboot.
    pub fn restore_db(&mut self, db: PolicyDb) {
        self.db = db;
    }

    /// Flows whose source lies outside the local network were initiated
    /// from the outside.
    pub fn is_inbound(&self, flow: &FlowMetadata) -> bool {
        !self.config.local_net.contains(flow.src_addr)
    }

    fn remote_of(&self, flow: &FlowMetadata) -> Ipv4Addr {
        if self.is_inbound(flow) {
            flow.src_addr
        } else {
            flow.dst_addr
        }
    }

    fn default_for(&self, flow: &FlowMetadata) -> Verdict {
        let defaults = self.db.defaults();
        if self.is_inbound(flow) {
            defaults.inbound
        } else {
            defaults.outbound
        }
    }

    fn record(&mut self, tick: Tick, kind: EventKind, flow: Option<FlowMetadata>) {
        debug_assert!(self.log.last().is_none_or(|e| e.tick <= tick), "time went backwards");
        self.log.push(GatewayEvent { tick, kind, flow });
    }

    fn enforce(&mut self, tick: Tick, flow: FlowMetadata, verdict: Verdict) -> Verdict {
        let kind = match verdict {
            Verdict::Allow => EventKind::FlowAllowed,
            Verdict::Drop => EventKind::FlowDropped,
        };
        self.record(tick, kind, Some(flow));
        verdict
    }

    fn send(&mut self, kind: MessageType, payload: &[u8]) {
        let keys = &self.keys;
        self.outbox.push(ToCss(wire::encode_frame(kind, payload, |m| keys.sign(m))));
    }

    pub fn process_flow(&mut self, flow: FlowMetadata, content_tag: u8, now: Tick) -> FlowDecision {
        if let Lookup::Hit(policy) = self.db.lookup(&flow) {
            let verdict = policy.verdict;
            return FlowDecision::Verdict(self.enforce(now, flow, verdict));
        }
        if self.link == CssLink::Disconnected {
            let verdict = self.default_for(&flow);
            return FlowDecision::Verdict(self.enforce(now, flow, verdict));
        }
        let request_id = self.next_request_id;
        self.next_request_id = self.next_request_id.wrapping_add(1);
        let request = AnalysisRequest::new(self.config.box_id, request_id, flow, content_tag);
        self.pending.insert(request_id, Parked { flow, sent_at: now });
        self.record(now, EventKind::CloudRequested, Some(flow));
        self.send(MessageType::Request, &wire::encode_request(&request));
        FlowDecision::CloudPending(request)
    }

    fn verified<'a>(&self, frame: &'a [u8]) -> Result<wire::RawFrame<'a>, GatewayError> {
        let raw = wire::decode_frame(frame)?;
        if !self.anchor.verify(&self.css_cert, raw.signed, &raw.signature) {
            return Err(GatewayError::BadSignature);
        }
        Ok(raw)
    }

    /// Handles a response frame. Unverifiable responses are discarded and
    /// their source logged; the parked flow then waits for its timeout.
    pub fn on_response(&mut self, frame: &[u8], source: Ipv4Addr, now: Tick) -> Result<Released, GatewayError> {
        let raw = match self.verified(frame) {
            Ok(raw) => raw,
            Err(err) => {
                self.record(now, EventKind::SuspiciousSource(source), None);
                return Err(err);
            }
        };
        let resp = AnalysisResponse::decode(raw.expect(MessageType::Response)?)?;
        if resp.box_id != self.config.box_id {
            return Err(GatewayError::WrongRecipient(resp.box_id));
        }
        let parked = *self
            .pending
            .get(&resp.request_id)
            .ok_or(GatewayError::UnknownRequestId(resp.request_id))?;
        if !resp.policy.matches(&parked.flow) {
            return Err(GatewayError::PolicyMismatch);
        }
        self.pending.remove(&resp.request_id);
        self.db.insert(resp.policy);
        let verdict = self.enforce(now, parked.flow, resp.policy.verdict);
        Ok(Released {
            request_id: resp.request_id,
            flow: parked.flow,
            verdict,
            cause: ReleaseCause::Response,
        })
    }

    /// Applies a signed policy update. Updates that do not verify against
    /// the registered cloud service are rejected and their source reported.
    pub fn receive_update(
        &mut self,
        frame: &[u8],
        source: Ipv4Addr,
        now: Tick,
    ) -> Result<UpdateOutcome, GatewayError> {
        let raw = match self.verified(frame) {
            Ok(raw) => raw,
            Err(err) => {
                self.reject_update(source, now);
                return Err(err);
            }
        };
        let update = match raw.expect(MessageType::Update).and_then(PolicyUpdate::decode) {
            Ok(u) => u,
            Err(err) => {
                self.record(now, EventKind::UpdateRejected, None);
                return Err(err.into());
            }
        };
        if update.box_id != self.config.box_id {
            self.record(now, EventKind::UpdateRejected, None);
            return Err(GatewayError::WrongRecipient(update.box_id));
        }
        let outcome = self.db.apply_update(&update);
        self.record(now, EventKind::UpdateApplied, None);
        Ok(outcome)
    }

    fn reject_update(&mut self, source: Ipv4Addr, now: Tick) {
        self.record(now, EventKind::UpdateRejected, None);
        self.record(now, EventKind::SuspiciousSource(source), None);
        let report = RogueReport {
            box_id: self.config.box_id,
            tick: now,
            source,
        };
        self.send(MessageType::RogueReport, &report.encode());
    }

    /// Releases every parked flow that has waited `response_timeout` ticks
    /// with its offline default verdict.
    pub fn expire(&mut self, now: Tick) -> Vec<Released> {
        let timeout = self.config.response_timeout;
        let expired: Vec<u32> = self
            .pending
            .iter()
            .filter(|(_, p)| now.saturating_sub(p.sent_at) >= timeout)
            .map(|(&id, _)| id)
            .collect();
        let mut out = Vec::with_capacity(expired.len());
        for request_id in expired {
            let parked = self.pending.remove(&request_id).expect("listed above");
            let verdict = self.default_for(&parked.flow);
            self.enforce(now, parked.flow, verdict);
            out.push(Released {
                request_id,
                flow: parked.flow,
                verdict,
                cause: ReleaseCause::Timeout,
            });
        }
        out
    }

    /// Adds a user-configured policy. Manual policies outrank anything the
    /// cloud sends.
    pub fn add_manual_policy(&mut self, pattern: MatchPattern, verdict: Verdict, now: Tick) -> SecurityPolicy {
        let policy = SecurityPolicy::manual(PolicyId(self.next_manual_id), pattern, verdict, now);
        self.next_manual_id += 1;
        self.db.insert(policy);
        policy
    }

    fn window_events(&self, window: TickWindow) -> &[GatewayEvent] {
        let lo = self.log.partition_point(|e| e.tick < window.start);
        let hi = self.log.partition_point(|e| e.tick <= window.end);
        &self.log[lo..hi.max(lo)]
    }

    /// `100 * (1 - dropped / total)` over the device's enforced flows in the
    /// window; 100 for a device without flows.
    pub fn security_rank(&self, device: DeviceId, window: TickWindow) -> f64 {
        let (mut total, mut dropped) = (0u64, 0u64);
        for event in self.window_events(window) {
            let Some(flow) = event.flow else { continue };
            if flow.device_id != device {
                continue;
            }
            match event.kind {
                EventKind::FlowAllowed => total += 1,
                EventKind::FlowDropped => {
                    total += 1;
                    dropped += 1;
                }
                _ => {}
            }
        }
        if total == 0 {
            100.0
        } else {
            100.0 * (1.0 - dropped as f64 / total as f64)
        }
    }

    /// Aggregates the log over `window` and queues the report for the cloud.
    pub fn emit_sensor_report(&mut self, window: TickWindow) -> SensorReport {
        let mut per_device: BTreeMap<DeviceId, (u32, u32, BTreeSet<Ipv4Addr>)> = BTreeMap::new();
        let mut suspicious = Vec::new();
        for event in self.window_events(window) {
            match (event.kind, event.flow) {
                (EventKind::FlowAllowed | EventKind::FlowDropped, Some(flow)) => {
                    let entry = per_device.entry(flow.device_id).or_default();
                    entry.0 += 1;
                    if event.kind == EventKind::FlowDropped {
                        entry.1 += 1;
                    }
                    entry.2.insert(self.remote_of(&flow));
                }
                (EventKind::SuspiciousSource(addr), _) => {
                    suspicious.push(SuspiciousSighting { tick: event.tick, addr });
                }
                _ => {}
            }
        }
        let report = SensorReport {
            box_id: self.config.box_id,
            window,
            devices: per_device
                .into_iter()
                .map(|(device, (flows, drops, remotes))| DeviceActivity {
                    device,
                    flows,
                    drops,
                    remotes: remotes.into_iter().collect(),
                })
                .collect(),
            suspicious,
        };
        self.send(MessageType::SensorReport, &report.encode());
        report
    }
}
