// SPDX-License-Identifier: Apache-2.0

//! Virtual middleboxes run by the cloud service and the chains that compose
//! them.
//!
//! Three kinds exist: a firewall with an allowlist and an ordered rule list,
//! an IDS matching signatures (optionally rate-conditioned), and a DPI stage
//! that drops flows carrying a banned content tag. An IPS is an IDS whose
//! drop verdict is enforced, which is what every stage here does.

mod dpi;
mod firewall;
mod ids;
mod manager;

pub use dpi::{eval_dpi, DpiConfig};
pub use firewall::{eval_firewall, FirewallConfig, FirewallDecision, FirewallRule};
pub use ids::{eval_ids, IdsConfig, IdsSignature, IdsState, RateCondition};
pub use manager::{ChainMode, ChainVerdict, MiddleboxManager, ServiceChain, StageResult};

use thiserror::Error;

use crate::flow::{FlowMetadata, Verdict};
use crate::Tick;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceId(pub u32);

/// Group of interchangeable instances sharing one configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PoolId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MiddleboxKind {
    Firewall,
    Ids,
    Dpi,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MiddleboxError {
    #[error("no live instance in pool {0:?}")]
    NoInstance(PoolId),
    #[error("instance {0:?} has no replica")]
    NoReplica(InstanceId),
    #[error("instance {0:?} and its replica are unavailable")]
    InstanceUnavailable(InstanceId),
    #[error("unknown instance {0:?}")]
    UnknownInstance(InstanceId),
    #[error("service chain is empty")]
    EmptyChain,
    #[error("instance {0:?} appears twice in one chain")]
    DuplicateInstance(InstanceId),
}

/// What a middlebox sees of a flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Inspection {
    pub flow: FlowMetadata,
    /// Opaque content tag, 0 when untagged.
    pub tag: u8,
    pub tick: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MiddleboxConfig {
    Firewall(FirewallConfig),
    Ids(IdsConfig),
    Dpi(DpiConfig),
}

impl MiddleboxConfig {
    pub fn kind(&self) -> MiddleboxKind {
        match self {
            MiddleboxConfig::Firewall(_) => MiddleboxKind::Firewall,
            MiddleboxConfig::Ids(_) => MiddleboxKind::Ids,
            MiddleboxConfig::Dpi(_) => MiddleboxKind::Dpi,
        }
    }
}

/// One deployed middlebox instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Middlebox {
    pub id: InstanceId,
    pub pool: PoolId,
    pub config: MiddleboxConfig,
    pub ids_state: IdsState,
    /// Number of flows this instance has inspected.
    pub evaluations: u64,
    pub replica_of: Option<InstanceId>,
}

/// Verdict of one stage plus, for firewalls, the deciding rule index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageOutcome {
    pub verdict: Verdict,
    pub firewall_rule: Option<usize>,
}

impl Middlebox {
    pub fn kind(&self) -> MiddleboxKind {
        self.config.kind()
    }

    pub fn evaluate(&mut self, input: &Inspection) -> StageOutcome {
        self.evaluations += 1;
        match &self.config {
            MiddleboxConfig::Firewall(fw) => {
                let d = fw.evaluate(&input.flow);
                StageOutcome { verdict: d.verdict, firewall_rule: d.rule }
            }
            MiddleboxConfig::Ids(ids) => StageOutcome {
                verdict: eval_ids(ids, &mut self.ids_state, input),
                firewall_rule: None,
            },
            MiddleboxConfig::Dpi(dpi) => StageOutcome {
                verdict: eval_dpi(dpi, input),
                firewall_rule: None,
            },
        }
    }

    /// Copies the mutable state of `source` into this instance.
    pub(crate) fn sync_from(&mut self, source: &Middlebox) {
        self.ids_state = source.ids_state.clone();
        self.evaluations = source.evaluations;
    }
}
