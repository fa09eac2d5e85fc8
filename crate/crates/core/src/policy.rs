// SPDX-License-Identifier: Apache-2.0

//! Security policies and the conflict-resolution order between them.

use core::cmp::Ordering;

use crate::flow::{FlowMetadata, MatchPattern, Verdict};
use crate::Tick;

/// Issuer-assigned policy identifier, unique within one issuer's stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PolicyId(pub u64);

/// Policy priority. Manual policies always outrank cloud-issued ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Priority {
    Normal = 1,
    High = 2,
    Manual = 3,
}

impl Priority {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Priority::Normal),
            2 => Some(Priority::High),
            3 => Some(Priority::Manual),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Issuer {
    Css,
    LocalUser,
}

impl Issuer {
    pub fn code(self) -> u8 {
        match self {
            Issuer::Css => 0,
            Issuer::LocalUser => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Issuer::Css),
            1 => Some(Issuer::LocalUser),
            _ => None,
        }
    }
}

/// A match pattern with a verdict, a priority and its provenance.
///
/// `issuer == LocalUser` holds exactly when `priority == Manual`; the
/// constructors enforce it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SecurityPolicy {
    pub id: PolicyId,
    pub pattern: MatchPattern,
    pub verdict: Verdict,
    pub priority: Priority,
    pub issuer: Issuer,
    pub issued_at: Tick,
}

/// Ordering key used to pick a winner among matching policies.
/// Larger wins: priority, then specificity, then recency, then id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct RankKey {
    pub priority: Priority,
    pub specificity: u8,
    pub issued_at: Tick,
    pub id: PolicyId,
}

impl SecurityPolicy {
    /// A policy configured by the gateway owner.
    pub fn manual(id: PolicyId, pattern: MatchPattern, verdict: Verdict, issued_at: Tick) -> Self {
        SecurityPolicy {
            id,
            pattern,
            verdict,
            priority: Priority::Manual,
            issuer: Issuer::LocalUser,
            issued_at,
        }
    }

    /// A policy issued by the cloud service.
    ///
    /// # Panics
    ///
    /// If `priority` is [`Priority::Manual`], which is reserved for the
    /// local user.
    pub fn css(
        id: PolicyId,
        pattern: MatchPattern,
        verdict: Verdict,
        priority: Priority,
        issued_at: Tick,
    ) -> Self {
        assert!(priority != Priority::Manual, "cloud policies cannot carry manual priority");
        SecurityPolicy {
            id,
            pattern,
            verdict,
            priority,
            issuer: Issuer::Css,
            issued_at,
        }
    }

    pub fn is_consistent(&self) -> bool {
        (self.issuer == Issuer::LocalUser) == (self.priority == Priority::Manual)
    }

    pub fn matches(&self, flow: &FlowMetadata) -> bool {
        self.pattern.matches(flow)
    }

    pub fn rank(&self) -> RankKey {
        RankKey {
            priority: self.priority,
            specificity: self.pattern.specificity(),
            issued_at: self.issued_at,
            id: self.id,
        }
    }

    /// Compares two policies by conflict-resolution order; `Greater` wins.
    ///
    /// Policies from different issuers never tie because their priorities
    /// differ; within one issuer ids are unique.
    pub fn outranks(&self, other: &SecurityPolicy) -> Ordering {
        self.rank().cmp(&other.rank())
    }
}
