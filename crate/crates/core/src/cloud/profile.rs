// SPDX-License-Identifier: Apache-2.0

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::flow::{BoxId, DeviceId, Subnet};
use crate::middlebox::PoolId;

/// Subscriber-defined traffic class, e.g. "IoT" or "personal devices".
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrafficClass(pub u16);

/// Per-subscriber analysis preferences held by the cloud service.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserProfile {
    pub box_id: BoxId,
    /// Address space behind the subscriber's gateway.
    pub local_net: Subnet,
    pub class_map: BTreeMap<DeviceId, TrafficClass>,
    /// Class of devices missing from `class_map`.
    pub default_class: TrafficClass,
    /// Middlebox pools each class is analyzed by, in order.
    pub chains: BTreeMap<TrafficClass, Vec<PoolId>>,
    /// Whether the subscriber's traffic may feed cross-network analytics
    /// and the shared policy store.
    pub share_data: bool,
    /// Evaluate every chain stage instead of stopping at the first drop.
    pub full_session_routing: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProfileError {
    #[error("traffic class {0:?} has no service chain")]
    MissingChain(TrafficClass),
    #[error("service chain of class {0:?} is empty")]
    EmptyChain(TrafficClass),
    #[error("service chain of class {0:?} names pool {1:?} twice")]
    DuplicatePool(TrafficClass, PoolId),
}

impl UserProfile {
    /// A profile where every device belongs to one class analyzed by
    /// `chain`.
    pub fn single_class(box_id: BoxId, local_net: Subnet, chain: Vec<PoolId>) -> Self {
        let class = TrafficClass(0);
        UserProfile {
            box_id,
            local_net,
            class_map: BTreeMap::new(),
            default_class: class,
            chains: [(class, chain)].into_iter().collect(),
            share_data: true,
            full_session_routing: false,
        }
    }

    pub fn class_of(&self, device: DeviceId) -> TrafficClass {
        self.class_map.get(&device).copied().unwrap_or(self.default_class)
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let used: BTreeSet<TrafficClass> = self
            .class_map
            .values()
            .copied()
            .chain(core::iter::once(self.default_class))
            .collect();
        for class in used {
            if !self.chains.contains_key(&class) {
                return Err(ProfileError::MissingChain(class));
            }
        }
        for (&class, pools) in &self.chains {
            if pools.is_empty() {
                return Err(ProfileError::EmptyChain(class));
            }
            let mut seen = BTreeSet::new();
            for pool in pools {
                if !seen.insert(*pool) {
                    return Err(ProfileError::DuplicatePool(class, *pool));
                }
            }
        }
        Ok(())
    }
}
