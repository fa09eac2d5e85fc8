// SPDX-License-Identifier: Apache-2.0

//! The gateway-local policy database.
//!
//! Policies are indexed by their wildcard mask: every distinct mask gets a
//! table keyed by the projected pattern, so a lookup costs one probe per
//! mask in use (at most 64) instead of a scan over all policies. Among the
//! matching candidates the winner is the maximum of
//! `(priority, specificity, issued_at, policy_id)`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use thiserror::Error;

use crate::flow::{FlowMetadata, MatchPattern, Verdict};
use crate::policy::{Issuer, PolicyId, SecurityPolicy};
use crate::wire::{self, PolicyUpdate, Reader, WireError, POLICY_LEN};

const SNAPSHOT_MAGIC: &[u8; 4] = b"EGPD";
const SNAPSHOT_VERSION: u8 = 1;

type PolicyKey = (Issuer, PolicyId);

/// Verdicts applied to flows with no matching policy while the cloud is
/// unreachable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DefaultVerdicts {
    /// Flows initiated from outside the local network.
    pub inbound: Verdict,
    /// Flows initiated by local devices.
    pub outbound: Verdict,
}

impl Default for DefaultVerdicts {
    fn default() -> Self {
        DefaultVerdicts {
            inbound: Verdict::Drop,
            outbound: Verdict::Allow,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lookup<'a> {
    Hit(&'a SecurityPolicy),
    Miss,
}

impl<'a> Lookup<'a> {
    pub fn policy(self) -> Option<&'a SecurityPolicy> {
        match self {
            Lookup::Hit(p) => Some(p),
            Lookup::Miss => None,
        }
    }

    pub fn verdict(self) -> Option<Verdict> {
        self.policy().map(|p| p.verdict)
    }
}

/// Result of applying a [`PolicyUpdate`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateOutcome {
    pub applied: usize,
    pub skipped: usize,
    /// The update's sequence number had already been applied.
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SnapshotError {
    #[error("snapshot checksum mismatch")]
    CorruptSnapshot,
    #[error("not a policy snapshot")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u8),
    #[error("malformed snapshot: {0}")]
    Malformed(#[from] WireError),
    #[error("duplicate policy in snapshot")]
    DuplicatePolicy,
}

#[derive(Clone, Debug, Default)]
pub struct PolicyDb {
    policies: BTreeMap<PolicyKey, SecurityPolicy>,
    index: BTreeMap<u8, BTreeMap<MatchPattern, BTreeSet<PolicyKey>>>,
    applied_updates: BTreeSet<u64>,
    defaults: DefaultVerdicts,
}

impl PartialEq for PolicyDb {
    fn eq(&self, other: &Self) -> bool {
        self.policies == other.policies
            && self.applied_updates == other.applied_updates
            && self.defaults == other.defaults
    }
}

impl Eq for PolicyDb {}

impl PolicyDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_defaults(defaults: DefaultVerdicts) -> Self {
        PolicyDb {
            defaults,
            ..Self::default()
        }
    }

    pub fn defaults(&self) -> DefaultVerdicts {
        self.defaults
    }

    pub fn set_defaults(&mut self, defaults: DefaultVerdicts) {
        self.defaults = defaults;
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn get(&self, issuer: Issuer, id: PolicyId) -> Option<&SecurityPolicy> {
        self.policies.get(&(issuer, id))
    }

    /// All stored policies ordered by `(issuer, id)`.
    pub fn iter(&self) -> impl Iterator<Item = &SecurityPolicy> + '_ {
        self.policies.values()
    }

    pub fn applied_updates(&self) -> impl Iterator<Item = u64> + '_ {
        self.applied_updates.iter().copied()
    }

    pub fn lookup(&self, flow: &FlowMetadata) -> Lookup<'_> {
        self.lookup_where(flow, |_| true)
    }

    /// Like [`lookup`](Self::lookup) but only considers policies accepted by
    /// `visible`.
    pub fn lookup_where(
        &self,
        flow: &FlowMetadata,
        mut visible: impl FnMut(&SecurityPolicy) -> bool,
    ) -> Lookup<'_> {
        let mut best: Option<&SecurityPolicy> = None;
        for (&mask, table) in &self.index {
            let Some(keys) = table.get(&MatchPattern::project(flow, mask)) else {
                continue;
            };
            for key in keys {
                let candidate = &self.policies[key];
                if !visible(candidate) {
                    continue;
                }
                if best.is_none_or(|b| candidate.rank() > b.rank()) {
                    best = Some(candidate);
                }
            }
        }
        best.map_or(Lookup::Miss, Lookup::Hit)
    }

    /// Inserts `policy`, replacing any stored policy with the same issuer
    /// and id. Returns the replaced policy.
    pub fn insert(&mut self, policy: SecurityPolicy) -> Option<SecurityPolicy> {
        let key = (policy.issuer, policy.id);
        let old = self.remove(policy.issuer, policy.id);
        self.index
            .entry(policy.pattern.mask())
            .or_default()
            .entry(policy.pattern)
            .or_default()
            .insert(key);
        self.policies.insert(key, policy);
        old
    }

    pub fn remove(&mut self, issuer: Issuer, id: PolicyId) -> Option<SecurityPolicy> {
        let key = (issuer, id);
        let old = self.policies.remove(&key)?;
        let mask = old.pattern.mask();
        if let Some(table) = self.index.get_mut(&mask) {
            if let Some(keys) = table.get_mut(&old.pattern) {
                keys.remove(&key);
                if keys.is_empty() {
                    table.remove(&old.pattern);
                }
            }
            if table.is_empty() {
                self.index.remove(&mask);
            }
        }
        Some(old)
    }

    /// Inserts every policy of `update` unless its sequence number was
    /// already applied, in which case nothing changes.
    ///
    /// Signature verification is the caller's job.
    pub fn apply_update(&mut self, update: &PolicyUpdate) -> UpdateOutcome {
        if !self.applied_updates.insert(update.seq) {
            return UpdateOutcome {
                applied: 0,
                skipped: update.policies.len(),
                stale: true,
            };
        }
        for policy in &update.policies {
            self.insert(*policy);
        }
        UpdateOutcome {
            applied: update.policies.len(),
            skipped: 0,
            stale: false,
        }
    }

    /// Serializes the database for reboot recovery.
    ///
    /// Layout: `"EGPD"`, version, default inbound and outbound verdicts,
    /// u32 policy count, policies (35 bytes each), u32 sequence count,
    /// u64 sequence numbers, CRC-32 of all preceding bytes.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            19 + self.policies.len() * POLICY_LEN + self.applied_updates.len() * 8,
        );
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.push(SNAPSHOT_VERSION);
        out.push(self.defaults.inbound.code());
        out.push(self.defaults.outbound.code());
        out.extend_from_slice(&(self.policies.len() as u32).to_be_bytes());
        for policy in self.policies.values() {
            wire::encode_policy(policy, &mut out);
        }
        out.extend_from_slice(&(self.applied_updates.len() as u32).to_be_bytes());
        for seq in &self.applied_updates {
            out.extend_from_slice(&seq.to_be_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_be_bytes());
        out
    }

    pub fn restore(bytes: &[u8]) -> Result<Self, SnapshotError> {
        if bytes.len() < 4 {
            return Err(SnapshotError::CorruptSnapshot);
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body).to_be_bytes() != crc {
            return Err(SnapshotError::CorruptSnapshot);
        }
        let mut r = Reader::new(body);
        if r.take(4)? != SNAPSHOT_MAGIC {
            return Err(SnapshotError::BadMagic);
        }
        let version = r.u8()?;
        if version != SNAPSHOT_VERSION {
            return Err(SnapshotError::UnsupportedVersion(version));
        }
        let verdict = |code: u8| {
            Verdict::from_code(code).ok_or(WireError::BadCode { field: "verdict", code })
        };
        let defaults = DefaultVerdicts {
            inbound: verdict(r.u8()?)?,
            outbound: verdict(r.u8()?)?,
        };
        let mut db = PolicyDb::with_defaults(defaults);
        for _ in 0..r.u32()? {
            let policy = r.policy()?;
            if db.insert(policy).is_some() {
                return Err(SnapshotError::DuplicatePolicy);
            }
        }
        for _ in 0..r.u32()? {
            db.applied_updates.insert(r.u64()?);
        }
        r.finish()?;
        Ok(db)
    }
}
