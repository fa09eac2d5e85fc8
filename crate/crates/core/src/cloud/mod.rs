// SPDX-License-Identifier: Apache-2.0

//! The cloud security service.
//!
//! Gateways send signed analysis requests; the service answers from its
//! policy store or by running the subscriber's middlebox chain, and pushes
//! delta updates back. High-priority policies go out on every tick, the
//! rest only inside configured low-activity windows. A port-scan detector
//! turns sources probing many targets into high-priority drop policies.
//!
//! Every mutating method is journaled for the backup instance; see
//! [`replication`].

pub mod analytics;
mod guard;
mod profile;
pub mod replication;
mod scan;

pub use analytics::AnalyticsSummary;
pub use guard::{AbuseGuard, AbuseThresholds, BlacklistEvent, BlacklistReason};
pub use profile::{ProfileError, TrafficClass, UserProfile};
pub use replication::{Command, ReplicationError, ReplicationRecord};
pub use scan::{ScanThresholds, ScanTracker, Scope, Target};

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::net::Ipv4Addr;

use thiserror::Error;

use crate::flow::{field, BoxId, FlowMetadata, MatchPattern, Verdict};
use crate::middlebox::{
    ChainMode, Inspection, InstanceId, MiddleboxConfig, MiddleboxError, MiddleboxKind,
    MiddleboxManager, ServiceChain,
};
use crate::poldb::PolicyDb;
use crate::policy::{Issuer, PolicyId, Priority, SecurityPolicy};
use crate::trust::{Certificate, Keypair, TrustAnchor};
use crate::wire::{
    self, AnalysisRequest, AnalysisResponse, MessageType, PolicyUpdate, RogueReport, SensorReport,
    UpdateTier, WireError,
};
use crate::{Tick, TickWindow};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Primary,
    Backup,
}

/// Which gateways a stored policy is disseminated to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Audience {
    All,
    Only(BoxId),
}

impl Audience {
    pub fn includes(self, box_id: BoxId) -> bool {
        match self {
            Audience::All => true,
            Audience::Only(b) => b == box_id,
        }
    }
}

/// Policy present in the store from the start; part of every bootstrap
/// update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BasePolicy {
    pub pattern: MatchPattern,
    pub verdict: Verdict,
    pub priority: Priority,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CloudConfig {
    /// Pool scan observations of all sharing subscribers and push attacker
    /// policies to everyone. When off each subscriber is analyzed alone.
    pub collaboration: bool,
    pub scan: ScanThresholds,
    pub abuse: AbuseThresholds,
    /// Windows in which bundled (non-high-priority) updates are sent.
    pub low_activity: Vec<TickWindow>,
    pub base_policies: Vec<BasePolicy>,
}

impl Default for CloudConfig {
    fn default() -> Self {
        CloudConfig {
            collaboration: true,
            scan: ScanThresholds::default(),
            abuse: AbuseThresholds::default(),
            low_activity: Vec::new(),
            base_policies: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CloudError {
    #[error("box {0} is not registered")]
    UnknownBox(BoxId),
    #[error("box {0} is blacklisted")]
    BlacklistedBox(BoxId),
    #[error("box {0} is already registered")]
    DuplicateBox(BoxId),
    #[error("registration is closed once the replication log has started")]
    RegistrationClosed,
    #[error("frame from box {0} failed signature verification")]
    BadSignature(BoxId),
    #[error("malformed frame from box {box_id}: {error}")]
    Malformed { box_id: BoxId, error: WireError },
    #[error("box {from} sent a message on behalf of box {claimed}")]
    ForeignBoxId { from: BoxId, claimed: BoxId },
    #[error("gateways do not send {0:?} messages")]
    UnexpectedMessage(MessageType),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Middlebox(#[from] MiddleboxError),
}

/// A frame the service wants delivered to a gateway.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outbound {
    pub to: BoxId,
    pub kind: MessageType,
    pub frame: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    StoreHit(PolicyId),
    Evaluated { policy: PolicyId, deciding: InstanceId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RequestRecord {
    pub tick: Tick,
    pub box_id: BoxId,
    pub metadata: FlowMetadata,
    pub content_tag: u8,
    pub resolution: Resolution,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Detection {
    pub tick: Tick,
    pub scope: Scope,
    pub source: Ipv4Addr,
    pub policy: PolicyId,
}

/// One update put on the wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Emission {
    pub tick: Tick,
    pub box_id: BoxId,
    pub seq: u64,
    pub tier: UpdateTier,
    pub policies: Vec<PolicyId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FrameOutcome {
    Responded(AnalysisResponse),
    ReportMerged,
    RogueRecorded(RogueReport),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TickOutcome {
    pub detections: Vec<Detection>,
    pub updates: Vec<PolicyUpdate>,
}

/// Comparable summary of everything failover must preserve.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateFingerprint {
    pub policies: Vec<(SecurityPolicy, Audience)>,
    pub sent: BTreeMap<BoxId, BTreeSet<PolicyId>>,
    pub update_seq: BTreeMap<BoxId, u64>,
    pub blacklist: BTreeSet<BoxId>,
    pub next_policy_id: u64,
    pub requests: usize,
    pub detections: usize,
}

fn tier_of(priority: Priority) -> UpdateTier {
    if UpdateTier::High.admits(priority) {
        UpdateTier::High
    } else {
        UpdateTier::Bundled
    }
}

fn tier_index(tier: UpdateTier) -> usize {
    match tier {
        UpdateTier::High => 0,
        UpdateTier::Bundled => 1,
    }
}

#[derive(Clone, Debug)]
struct BoxRecord {
    cert: Certificate,
    profile: UserProfile,
    chains: BTreeMap<TrafficClass, ServiceChain>,
    sent: BTreeSet<PolicyId>,
    /// Visible, not yet sent, per tier.
    pending: [BTreeSet<PolicyId>; 2],
    update_seq: u64,
    bootstrapped: bool,
}

/// Cloud security service state.
///
/// A backup instance must be built from the same configuration,
/// middleboxes and registrations as its primary and then fed only through
/// [`apply_replication`](Self::apply_replication); calling a mutating
/// method on a backup panics.
#[derive(Clone, Debug)]
pub struct CloudService {
    config: CloudConfig,
    role: Role,
    keys: Keypair,
    anchor: TrustAnchor,
    middleboxes: MiddleboxManager,
    boxes: BTreeMap<BoxId, BoxRecord>,
    store: PolicyDb,
    audience: BTreeMap<PolicyId, Audience>,
    next_policy_id: u64,
    request_log: Vec<RequestRecord>,
    scans: ScanTracker,
    guard: AbuseGuard,
    blacklist: BTreeSet<BoxId>,
    blacklist_events: Vec<BlacklistEvent>,
    detections: Vec<Detection>,
    emissions: Vec<Emission>,
    analytics: AnalyticsSummary,
    /// (box, firewall instance, rule) triples already expanded into
    /// store-side general rules.
    derived_rules: BTreeSet<(BoxId, InstanceId, usize)>,
    outbox: Vec<Outbound>,
    journal: Vec<ReplicationRecord>,
    replication_seq: u64,
    depth: u32,
}

impl CloudService {
    pub fn new(
        config: CloudConfig,
        role: Role,
        keys: Keypair,
        anchor: TrustAnchor,
        middleboxes: MiddleboxManager,
    ) -> Self {
        let mut css = CloudService {
            scans: ScanTracker::new(config.scan),
            guard: AbuseGuard::new(config.abuse),
            config,
            role,
            keys,
            anchor,
            middleboxes,
            boxes: BTreeMap::new(),
            store: PolicyDb::new(),
            audience: BTreeMap::new(),
            next_policy_id: 1,
            request_log: Vec::new(),
            blacklist: BTreeSet::new(),
            blacklist_events: Vec::new(),
            detections: Vec::new(),
            emissions: Vec::new(),
            analytics: AnalyticsSummary::default(),
            derived_rules: BTreeSet::new(),
            outbox: Vec::new(),
            journal: Vec::new(),
            replication_seq: 0,
            depth: 0,
        };
        for base in css.config.base_policies.clone() {
            let policy = css.mint(base.pattern, base.verdict, base.priority, 0);
            css.publish(policy, Audience::All, None);
        }
        css
    }

    /// Registers a gateway, binding each traffic class of its profile to
    /// concrete middlebox instances. Only allowed before the first
    /// journaled mutation so that a backup can repeat it.
    pub fn register_box(&mut self, profile: UserProfile, cert: Certificate) -> Result<(), CloudError> {
        if self.replication_seq > 0 {
            return Err(CloudError::RegistrationClosed);
        }
        let box_id = profile.box_id;
        if self.boxes.contains_key(&box_id) {
            return Err(CloudError::DuplicateBox(box_id));
        }
        profile.validate()?;
        let mut chains = BTreeMap::new();
        for (&class, pools) in &profile.chains {
            let stages = pools
                .iter()
                .map(|&pool| self.middleboxes.assign_and_balance(pool))
                .collect::<Result<Vec<_>, _>>()?;
            chains.insert(class, ServiceChain::new(stages)?);
        }
        let mut pending = [BTreeSet::new(), BTreeSet::new()];
        for p in self.store.iter() {
            if self.audience[&p.id].includes(box_id) {
                pending[tier_index(tier_of(p.priority))].insert(p.id);
            }
        }
        self.boxes.insert(
            box_id,
            BoxRecord {
                cert,
                profile,
                chains,
                sent: BTreeSet::new(),
                pending,
                update_seq: 0,
                bootstrapped: false,
            },
        );
        Ok(())
    }

    // ---- journaling -------------------------------------------------------

    fn journaled<T>(&mut self, command: Command, f: impl FnOnce(&mut Self) -> T) -> T {
        if self.depth == 0 {
            assert!(
                self.role == Role::Primary,
                "a backup only mutates through apply_replication"
            );
            self.replication_seq += 1;
            self.journal.push(ReplicationRecord::new(self.replication_seq, &command));
        }
        self.depth += 1;
        let out = f(self);
        self.depth -= 1;
        out
    }

    fn execute(&mut self, command: Command) {
        // Results are discarded: the primary saw the same outcome.
        match command {
            Command::Frame { from, now, frame } => {
                let _ = self.handle_frame(from, &frame, now);
            }
            Command::Request { now, request } => {
                let _ = self.handle_request(&request, now);
            }
            Command::Observe { now, request } => {
                let _ = self.record_and_blacklist(request.box_id, &request, now);
            }
            Command::DetectScans { now } => {
                self.detect_port_scan(now);
            }
            Command::GenerateUpdate { now, box_id, tier } => {
                self.generate_update(box_id, tier, now);
            }
            Command::Disseminate { now } => {
                self.disseminate(now);
            }
            Command::Tick { now } => {
                self.tick(now);
            }
            Command::Reports { now, reports } => {
                self.aggregate_sensor_reports(&reports, now);
            }
            Command::Revoke { now, box_id } => {
                let _ = self.revoke(box_id, now);
            }
            Command::FailMiddlebox { instance } => {
                let _ = self.fail_middlebox(instance);
            }
            Command::Publish { now, pattern, verdict, priority, audience } => {
                self.publish_policy(pattern, verdict, priority, audience, now);
            }
        }
    }

    /// Journal records produced since the last call (primary only).
    pub fn drain_replication(&mut self) -> Vec<ReplicationRecord> {
        core::mem::take(&mut self.journal)
    }

    /// Sequence number of the last record produced (primary) or applied
    /// (backup).
    pub fn replication_seq(&self) -> u64 {
        self.replication_seq
    }

    /// Re-executes one journaled command on a backup. Records must arrive
    /// in order; an already applied record is ignored.
    pub fn apply_replication(&mut self, record: &ReplicationRecord) -> Result<(), ReplicationError> {
        if self.role != Role::Backup {
            return Err(ReplicationError::WrongRole(Role::Backup));
        }
        if record.seq <= self.replication_seq {
            return Ok(());
        }
        let expected = self.replication_seq + 1;
        if record.seq != expected {
            return Err(ReplicationError::Gap { expected, got: record.seq });
        }
        let command = record.command()?;
        self.depth += 1;
        self.execute(command);
        self.depth -= 1;
        self.outbox.clear();
        self.replication_seq = record.seq;
        Ok(())
    }

    /// Turns a backup into the primary, provided it has applied every
    /// record up to `acknowledged`.
    pub fn promote(&mut self, acknowledged: u64) -> Result<(), ReplicationError> {
        if self.role != Role::Backup {
            return Err(ReplicationError::WrongRole(Role::Backup));
        }
        if self.replication_seq != acknowledged {
            return Err(ReplicationError::Gap {
                expected: acknowledged,
                got: self.replication_seq,
            });
        }
        self.role = Role::Primary;
        Ok(())
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn fingerprint(&self) -> StateFingerprint {
        StateFingerprint {
            policies: self.store.iter().map(|p| (*p, self.audience[&p.id])).collect(),
            sent: self.boxes.iter().map(|(b, r)| (*b, r.sent.clone())).collect(),
            update_seq: self.boxes.iter().map(|(b, r)| (*b, r.update_seq)).collect(),
            blacklist: self.blacklist.clone(),
            next_policy_id: self.next_policy_id,
            requests: self.request_log.len(),
            detections: self.detections.len(),
        }
    }

    // ---- accessors --------------------------------------------------------

    pub fn config(&self) -> &CloudConfig {
        &self.config
    }

    pub fn store(&self) -> &PolicyDb {
        &self.store
    }

    pub fn audience(&self, id: PolicyId) -> Option<Audience> {
        self.audience.get(&id).copied()
    }

    /// Stored policies `box_id` is entitled to, in id order.
    pub fn visible_policies(&self, box_id: BoxId) -> impl Iterator<Item = &SecurityPolicy> + '_ {
        let mut v: Vec<&SecurityPolicy> = self
            .store
            .iter()
            .filter(|p| self.audience[&p.id].includes(box_id))
            .collect();
        v.sort_by_key(|p| p.id);
        v.into_iter()
    }

    pub fn is_registered(&self, box_id: BoxId) -> bool {
        self.boxes.contains_key(&box_id)
    }

    pub fn boxes(&self) -> impl Iterator<Item = BoxId> + '_ {
        self.boxes.keys().copied()
    }

    pub fn profile(&self, box_id: BoxId) -> Option<&UserProfile> {
        self.boxes.get(&box_id).map(|r| &r.profile)
    }

    pub fn chain(&self, box_id: BoxId, class: TrafficClass) -> Option<&ServiceChain> {
        self.boxes.get(&box_id)?.chains.get(&class)
    }

    pub fn sent_to(&self, box_id: BoxId) -> Option<&BTreeSet<PolicyId>> {
        self.boxes.get(&box_id).map(|r| &r.sent)
    }

    pub fn pending_for(&self, box_id: BoxId, tier: UpdateTier) -> Option<&BTreeSet<PolicyId>> {
        self.boxes.get(&box_id).map(|r| &r.pending[tier_index(tier)])
    }

    pub fn update_seq(&self, box_id: BoxId) -> Option<u64> {
        self.boxes.get(&box_id).map(|r| r.update_seq)
    }

    pub fn is_blacklisted(&self, box_id: BoxId) -> bool {
        self.blacklist.contains(&box_id)
    }

    pub fn blacklist(&self) -> &BTreeSet<BoxId> {
        &self.blacklist
    }

    pub fn blacklist_events(&self) -> &[BlacklistEvent] {
        &self.blacklist_events
    }

    pub fn request_log(&self) -> &[RequestRecord] {
        &self.request_log
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn emissions(&self) -> &[Emission] {
        &self.emissions
    }

    pub fn analytics(&self) -> &AnalyticsSummary {
        &self.analytics
    }

    pub fn middleboxes(&self) -> &MiddleboxManager {
        &self.middleboxes
    }

    pub fn scan_tracker(&self) -> &ScanTracker {
        &self.scans
    }

    pub fn anchor(&self) -> &TrustAnchor {
        &self.anchor
    }

    pub fn drain_outbox(&mut self) -> Vec<Outbound> {
        core::mem::take(&mut self.outbox)
    }

    // ---- store ------------------------------------------------------------

    fn mint(&mut self, pattern: MatchPattern, verdict: Verdict, priority: Priority, now: Tick) -> SecurityPolicy {
        let id = PolicyId(self.next_policy_id);
        self.next_policy_id += 1;
        SecurityPolicy::css(id, pattern, verdict, priority, now)
    }

    /// Stores `policy` and queues it for every box in `audience` except
    /// `delivered_to`, which already has it.
    fn publish(&mut self, policy: SecurityPolicy, audience: Audience, delivered_to: Option<BoxId>) {
        self.store.insert(policy);
        self.audience.insert(policy.id, audience);
        let tier = tier_index(tier_of(policy.priority));
        for (&b, rec) in self.boxes.iter_mut() {
            if !audience.includes(b) {
                continue;
            }
            if delivered_to == Some(b) {
                rec.sent.insert(policy.id);
            } else if !rec.sent.contains(&policy.id) {
                rec.pending[tier].insert(policy.id);
            }
        }
    }

    /// Adds an operator policy to the store at run time.
    pub fn publish_policy(
        &mut self,
        pattern: MatchPattern,
        verdict: Verdict,
        priority: Priority,
        audience: Audience,
        now: Tick,
    ) -> SecurityPolicy {
        let cmd = Command::Publish { now, pattern, verdict, priority, audience };
        self.journaled(cmd, |s| {
            let policy = s.mint(pattern, verdict, priority, now);
            s.publish(policy, audience, None);
            policy
        })
    }

    fn mark_sent(&mut self, box_id: BoxId, id: PolicyId) {
        if let Some(rec) = self.boxes.get_mut(&box_id) {
            rec.sent.insert(id);
            for set in &mut rec.pending {
                set.remove(&id);
            }
        }
    }

    fn send(&mut self, to: BoxId, kind: MessageType, payload: &[u8]) {
        let keys = &self.keys;
        let frame = wire::encode_frame(kind, payload, |m| keys.sign(m));
        self.outbox.push(Outbound { to, kind, frame });
    }

    fn check_box(&self, box_id: BoxId) -> Result<&BoxRecord, CloudError> {
        let rec = self.boxes.get(&box_id).ok_or(CloudError::UnknownBox(box_id))?;
        if self.blacklist.contains(&box_id) {
            return Err(CloudError::BlacklistedBox(box_id));
        }
        Ok(rec)
    }

    fn add_to_blacklist(&mut self, box_id: BoxId, reason: BlacklistReason, now: Tick) -> Option<BlacklistEvent> {
        if !self.blacklist.insert(box_id) {
            return None;
        }
        let event = BlacklistEvent { box_id, tick: now, reason };
        self.blacklist_events.push(event);
        Some(event)
    }

    // ---- request path -----------------------------------------------------

    /// Verifies and dispatches one frame received from gateway `from`.
    /// Frames that fail to decode or verify count towards blacklisting the
    /// sender.
    pub fn handle_frame(&mut self, from: BoxId, frame: &[u8], now: Tick) -> Result<FrameOutcome, CloudError> {
        let cmd = Command::Frame { from, now, frame: frame.to_vec() };
        self.journaled(cmd, |s| s.frame_inner(from, frame, now))
    }

    fn frame_inner(&mut self, from: BoxId, frame: &[u8], now: Tick) -> Result<FrameOutcome, CloudError> {
        let cert = self.check_box(from)?.cert;
        let raw = match wire::decode_frame(frame) {
            Ok(raw) => raw,
            Err(error) => return Err(self.bad_frame(from, now, CloudError::Malformed { box_id: from, error })),
        };
        if !self.anchor.verify(&cert, raw.signed, &raw.signature) {
            return Err(self.bad_frame(from, now, CloudError::BadSignature(from)));
        }
        match raw.kind {
            MessageType::Request => {
                let req = match wire::decode_request(raw.payload) {
                    Ok(req) => req,
                    Err(error) => {
                        return Err(self.bad_frame(from, now, CloudError::Malformed { box_id: from, error }))
                    }
                };
                if req.box_id != from {
                    let err = CloudError::ForeignBoxId { from, claimed: req.box_id };
                    return Err(self.bad_frame(from, now, err));
                }
                self.serve(req, now).map(FrameOutcome::Responded)
            }
            MessageType::SensorReport => {
                let report = match SensorReport::decode(raw.payload) {
                    Ok(r) => r,
                    Err(error) => {
                        return Err(self.bad_frame(from, now, CloudError::Malformed { box_id: from, error }))
                    }
                };
                if report.box_id != from {
                    let err = CloudError::ForeignBoxId { from, claimed: report.box_id };
                    return Err(self.bad_frame(from, now, err));
                }
                self.merge_reports(core::slice::from_ref(&report));
                Ok(FrameOutcome::ReportMerged)
            }
            MessageType::RogueReport => {
                let report = match RogueReport::decode(raw.payload) {
                    Ok(r) => r,
                    Err(error) => {
                        return Err(self.bad_frame(from, now, CloudError::Malformed { box_id: from, error }))
                    }
                };
                if report.box_id != from {
                    let err = CloudError::ForeignBoxId { from, claimed: report.box_id };
                    return Err(self.bad_frame(from, now, err));
                }
                self.analytics.rogue_reports.push(report);
                Ok(FrameOutcome::RogueRecorded(report))
            }
            other => Err(self.bad_frame(from, now, CloudError::UnexpectedMessage(other))),
        }
    }

    fn bad_frame(&mut self, from: BoxId, now: Tick, err: CloudError) -> CloudError {
        if self.guard.observe_malformed(from) {
            self.add_to_blacklist(from, BlacklistReason::MalformedFrames, now);
        }
        err
    }

    /// Answers an already authenticated request: from the store when a
    /// visible policy matches, otherwise by evaluating the subscriber's
    /// chain and minting a policy from its verdict.
    pub fn handle_request(&mut self, req: &AnalysisRequest, now: Tick) -> Result<AnalysisResponse, CloudError> {
        let cmd = Command::Request { now, request: *req };
        self.journaled(cmd, |s| s.serve(*req, now))
    }

    fn serve(&mut self, req: AnalysisRequest, now: Tick) -> Result<AnalysisResponse, CloudError> {
        let box_id = req.box_id;
        self.check_box(box_id)?;
        if self.observe(box_id, &req, now).is_some() {
            return Err(CloudError::BlacklistedBox(box_id));
        }
        let flow = req.metadata;
        let rec = &self.boxes[&box_id];
        let share = rec.profile.share_data;
        if share && !rec.profile.local_net.contains(flow.src_addr) {
            let scope = if self.config.collaboration { Scope::Global } else { Scope::Box(box_id) };
            self.scans.observe(scope, flow.src_addr, (flow.dst_addr, flow.dst_port), now);
        }

        let audience = &self.audience;
        let hit = self
            .store
            .lookup_where(&flow, |p| audience.get(&p.id).is_some_and(|a| a.includes(box_id)))
            .policy()
            .copied();

        let (policy, resolution) = match hit {
            Some(p) => {
                self.mark_sent(box_id, p.id);
                (p, Resolution::StoreHit(p.id))
            }
            None => self.evaluate(box_id, &req, now)?,
        };
        self.request_log.push(RequestRecord {
            tick: now,
            box_id,
            metadata: flow,
            content_tag: req.content_tag,
            resolution,
        });
        let resp = AnalysisResponse { box_id, request_id: req.request_id, policy };
        self.send(box_id, MessageType::Response, &resp.encode());
        if matches!(resolution, Resolution::StoreHit(_)) {
            self.push_exceptions(box_id, &policy, now);
        }
        Ok(resp)
    }

    /// A cached general policy must not shadow narrower ones the box has
    /// not received yet, so those go out right behind the response.
    fn push_exceptions(&mut self, box_id: BoxId, general: &SecurityPolicy, now: Tick) {
        let Some(rec) = self.boxes.get(&box_id) else { return };
        let store = &self.store;
        let shadowed = |id: &PolicyId| {
            store.get(Issuer::Css, *id).is_some_and(|p| {
                p.pattern.overlaps(&general.pattern) && p.outranks(general) == core::cmp::Ordering::Greater
            })
        };
        let batches: Vec<(UpdateTier, BTreeSet<PolicyId>)> = [UpdateTier::High, UpdateTier::Bundled]
            .into_iter()
            .map(|tier| (tier, rec.pending[tier_index(tier)].iter().copied().filter(shadowed).collect()))
            .collect();
        for (tier, ids) in batches {
            if !ids.is_empty() {
                self.emit(box_id, tier, ids, now);
            }
        }
    }

    fn evaluate(
        &mut self,
        box_id: BoxId,
        req: &AnalysisRequest,
        now: Tick,
    ) -> Result<(SecurityPolicy, Resolution), CloudError> {
        let flow = req.metadata;
        let rec = &self.boxes[&box_id];
        let class = rec.profile.class_of(flow.device_id);
        let chain = rec.chains[&class].clone();
        let share = rec.profile.share_data;
        let mode = if rec.profile.full_session_routing { ChainMode::FullSession } else { ChainMode::ShortCircuit };
        let input = Inspection { flow, tag: req.content_tag, tick: now };
        let verdict = self.middleboxes.eval_chain(&chain, &input, mode)?;

        let pattern = MatchPattern::project(&flow, field::ALL & !field::SRC_PORT);
        let policy = self.mint(pattern, verdict.verdict, Priority::Normal, now);
        if share {
            let audience = if self.config.collaboration { Audience::All } else { Audience::Only(box_id) };
            self.publish(policy, audience, Some(box_id));
            let stage = *verdict.deciding_stage();
            if stage.kind == MiddleboxKind::Firewall && stage.verdict == Verdict::Drop {
                if let Some(rule) = stage.firewall_rule {
                    self.derive_general_rule(box_id, stage.requested, stage.instance, rule, now);
                }
            }
        }
        Ok((policy, Resolution::Evaluated { policy: policy.id, deciding: verdict.deciding }))
    }

    /// A firewall rule that drops a whole device class regardless of
    /// destination becomes a box-scoped drop plus one allow per known
    /// server, so later flows of that class are answered from the store.
    fn derive_general_rule(&mut self, box_id: BoxId, requested: InstanceId, instance: InstanceId, rule: usize, now: Tick) {
        let Some(MiddleboxConfig::Firewall(fw)) = self.middleboxes.instance(instance).map(|m| &m.config) else {
            return;
        };
        let r = fw.rules[rule];
        if r.pattern.dst_addr.is_some() || !self.derived_rules.insert((box_id, requested, rule)) {
            return;
        }
        let servers: Vec<Ipv4Addr> = fw.allowlist.iter().copied().collect();
        let drop = self.mint(r.pattern, Verdict::Drop, Priority::Normal, now);
        self.publish(drop, Audience::Only(box_id), None);
        for server in servers {
            let allow = self.mint(r.pattern.with_dst_addr(server), Verdict::Allow, Priority::Normal, now);
            self.publish(allow, Audience::Only(box_id), None);
        }
    }

    /// Counts `req` against the repeat threshold and blacklists the box
    /// when it is exceeded.
    pub fn record_and_blacklist(
        &mut self,
        box_id: BoxId,
        req: &AnalysisRequest,
        now: Tick,
    ) -> Option<BlacklistEvent> {
        let request = AnalysisRequest { box_id, ..*req };
        self.journaled(Command::Observe { now, request }, |s| s.observe(box_id, req, now))
    }

    fn observe(&mut self, box_id: BoxId, req: &AnalysisRequest, now: Tick) -> Option<BlacklistEvent> {
        if self.guard.observe_request(box_id, req.metadata, now) {
            self.add_to_blacklist(box_id, BlacklistReason::RepeatedRequests, now)
        } else {
            None
        }
    }

    /// Revokes the box's certificate and blacklists it.
    pub fn revoke(&mut self, box_id: BoxId, now: Tick) -> Result<BlacklistEvent, CloudError> {
        self.journaled(Command::Revoke { now, box_id }, |s| {
            let subject = s.boxes.get(&box_id).ok_or(CloudError::UnknownBox(box_id))?.cert.subject;
            s.anchor.revoke(subject);
            Ok(s.add_to_blacklist(box_id, BlacklistReason::Revoked, now)
                .unwrap_or(BlacklistEvent { box_id, tick: now, reason: BlacklistReason::Revoked }))
        })
    }

    /// Fails a middlebox instance over to its standby replica.
    pub fn fail_middlebox(&mut self, instance: InstanceId) -> Result<InstanceId, CloudError> {
        self.journaled(Command::FailMiddlebox { instance }, |s| {
            s.middleboxes.fail_and_swap(instance).map_err(CloudError::from)
        })
    }

    // ---- analytics --------------------------------------------------------

    /// Flags every source that crossed the scan threshold and stores a
    /// high-priority drop policy for it.
    pub fn detect_port_scan(&mut self, now: Tick) -> Vec<Detection> {
        self.journaled(Command::DetectScans { now }, |s| s.detect_inner(now))
    }

    fn detect_inner(&mut self, now: Tick) -> Vec<Detection> {
        let found = self.scans.detect(now);
        let mut out = Vec::with_capacity(found.len());
        for (scope, source) in found {
            let policy = self.mint(MatchPattern::ANY.with_src_addr(source), Verdict::Drop, Priority::High, now);
            let audience = match scope {
                Scope::Global => Audience::All,
                Scope::Box(b) => Audience::Only(b),
            };
            self.publish(policy, audience, None);
            let d = Detection { tick: now, scope, source, policy: policy.id };
            self.detections.push(d);
            out.push(d);
        }
        out
    }

    /// Folds sensor reports into the cross-network statistics. Reports from
    /// subscribers that opted out of sharing are only counted.
    pub fn aggregate_sensor_reports(&mut self, reports: &[SensorReport], now: Tick) -> &AnalyticsSummary {
        let cmd = Command::Reports { now, reports: reports.to_vec() };
        self.journaled(cmd, |s| s.merge_reports(reports));
        &self.analytics
    }

    fn merge_reports(&mut self, reports: &[SensorReport]) {
        for report in reports {
            let shared = self.boxes.get(&report.box_id).is_some_and(|r| r.profile.share_data);
            self.analytics.merge(report, shared);
        }
    }

    // ---- dissemination ----------------------------------------------------

    /// Emits one signed update with every visible policy of `tier` that the
    /// box has not received yet. `None` when there is nothing new or the
    /// box may not receive updates.
    pub fn generate_update(&mut self, box_id: BoxId, tier: UpdateTier, now: Tick) -> Option<PolicyUpdate> {
        self.journaled(Command::GenerateUpdate { now, box_id, tier }, |s| s.update_inner(box_id, tier, now))
    }

    fn update_inner(&mut self, box_id: BoxId, tier: UpdateTier, now: Tick) -> Option<PolicyUpdate> {
        if self.blacklist.contains(&box_id) {
            return None;
        }
        let rec = self.boxes.get_mut(&box_id)?;
        let ids = core::mem::take(&mut rec.pending[tier_index(tier)]);
        if ids.is_empty() {
            return None;
        }
        Some(self.emit(box_id, tier, ids, now))
    }

    fn emit(&mut self, box_id: BoxId, tier: UpdateTier, ids: BTreeSet<PolicyId>, now: Tick) -> PolicyUpdate {
        let rec = self.boxes.get_mut(&box_id).expect("emitting to a registered box");
        for set in &mut rec.pending {
            for id in &ids {
                set.remove(id);
            }
        }
        rec.sent.extend(ids.iter().copied());
        rec.update_seq += 1;
        let seq = rec.update_seq;
        let policies: Vec<SecurityPolicy> = ids
            .iter()
            .map(|id| *self.store.get(Issuer::Css, *id).expect("pending ids are stored"))
            .collect();
        let update = PolicyUpdate { box_id, seq, tier, policies };
        self.send(box_id, MessageType::Update, &update.encode());
        self.emissions.push(Emission {
            tick: now,
            box_id,
            seq,
            tier,
            policies: ids.into_iter().collect(),
        });
        update
    }

    /// Pushes pending updates: a full bootstrap to boxes that never had
    /// one, high-priority deltas to everyone, and bundled deltas only inside
    /// a low-activity window.
    pub fn disseminate(&mut self, now: Tick) -> Vec<PolicyUpdate> {
        self.journaled(Command::Disseminate { now }, |s| s.disseminate_inner(now))
    }

    fn disseminate_inner(&mut self, now: Tick) -> Vec<PolicyUpdate> {
        let quiet = self.config.low_activity.iter().any(|w| w.contains(now));
        let targets: Vec<BoxId> = self.boxes.keys().copied().filter(|b| !self.blacklist.contains(b)).collect();
        let mut out = Vec::new();
        for b in targets {
            let bootstrap = !self.boxes[&b].bootstrapped;
            out.extend(self.update_inner(b, UpdateTier::High, now));
            if bootstrap || quiet {
                out.extend(self.update_inner(b, UpdateTier::Bundled, now));
            }
            self.boxes.get_mut(&b).expect("listed above").bootstrapped = true;
        }
        out
    }

    /// Per-tick housekeeping: scan detection followed by dissemination.
    pub fn tick(&mut self, now: Tick) -> TickOutcome {
        self.journaled(Command::Tick { now }, |s| {
            let detections = s.detect_inner(now);
            let updates = s.disseminate_inner(now);
            s.guard.prune(now);
            TickOutcome { detections, updates }
        })
    }
}

/// Promotes `backup` after checking it has applied everything `primary`
/// journaled.
pub fn replicate_and_failover(primary: &CloudService, mut backup: CloudService) -> Result<CloudService, ReplicationError> {
    backup.promote(primary.replication_seq())?;
    Ok(backup)
}
