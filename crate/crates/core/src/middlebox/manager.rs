// SPDX-License-Identifier: Apache-2.0

//! Middlebox manager: deployment, load balancing, chain evaluation and
//! hot-swap of failed instances.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use super::{
    Inspection, InstanceId, Middlebox, MiddleboxConfig, MiddleboxError, MiddleboxKind, PoolId,
};
use crate::flow::Verdict;

/// Ordered, duplicate-free list of instances a flow traverses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServiceChain(Vec<InstanceId>);

impl ServiceChain {
    pub fn new(stages: Vec<InstanceId>) -> Result<Self, MiddleboxError> {
        if stages.is_empty() {
            return Err(MiddleboxError::EmptyChain);
        }
        let mut seen = BTreeSet::new();
        for id in &stages {
            if !seen.insert(*id) {
                return Err(MiddleboxError::DuplicateInstance(*id));
            }
        }
        Ok(ServiceChain(stages))
    }

    pub fn stages(&self) -> &[InstanceId] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainMode {
    /// Stop at the first dropping stage.
    ShortCircuit,
    /// Run every stage and record all results (full-session routing).
    FullSession,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageResult {
    /// Instance named by the chain.
    pub requested: InstanceId,
    /// Instance that actually evaluated (a promoted replica after a swap).
    pub instance: InstanceId,
    pub kind: MiddleboxKind,
    pub verdict: Verdict,
    pub firewall_rule: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainVerdict {
    pub verdict: Verdict,
    /// First dropping stage, or the last stage when every stage allowed.
    pub deciding: InstanceId,
    pub stages: Vec<StageResult>,
}

impl ChainVerdict {
    pub fn deciding_stage(&self) -> &StageResult {
        self.stages
            .iter()
            .find(|s| s.verdict == Verdict::Drop)
            .unwrap_or_else(|| self.stages.last().expect("chains are non-empty"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MiddleboxManager {
    instances: BTreeMap<InstanceId, Middlebox>,
    failed: BTreeSet<InstanceId>,
    /// Standby replica of each primary that has one.
    replicas: BTreeMap<InstanceId, InstanceId>,
    /// Failed instance -> replica now serving in its place.
    promoted: BTreeMap<InstanceId, InstanceId>,
    loads: BTreeMap<InstanceId, u64>,
    next_id: u32,
}

impl MiddleboxManager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn deploy(&mut self, pool: PoolId, config: MiddleboxConfig) -> InstanceId {
        let id = InstanceId(self.next_id);
        self.next_id += 1;
        self.instances.insert(
            id,
            Middlebox {
                id,
                pool,
                config,
                ids_state: Default::default(),
                evaluations: 0,
                replica_of: None,
            },
        );
        self.loads.insert(id, 0);
        id
    }

    /// Deploys a standby copy of `primary` into the backup pool.
    pub fn deploy_replica(&mut self, primary: InstanceId) -> Result<InstanceId, MiddleboxError> {
        let source = self
            .instances
            .get(&primary)
            .ok_or(MiddleboxError::UnknownInstance(primary))?
            .clone();
        let id = InstanceId(self.next_id);
        self.next_id += 1;
        self.instances.insert(
            id,
            Middlebox {
                id,
                replica_of: Some(primary),
                ..source
            },
        );
        self.replicas.insert(primary, id);
        Ok(id)
    }

    pub fn instance(&self, id: InstanceId) -> Option<&Middlebox> {
        self.instances.get(&id)
    }

    pub fn instances(&self) -> impl Iterator<Item = &Middlebox> + '_ {
        self.instances.values()
    }

    pub fn load(&self, id: InstanceId) -> u64 {
        self.loads.get(&id).copied().unwrap_or(0)
    }

    pub fn is_live(&self, id: InstanceId) -> bool {
        self.instances.contains_key(&id) && !self.failed.contains(&id)
    }

    fn is_standby(&self, id: InstanceId) -> bool {
        self.replicas.values().any(|&r| r == id) && !self.promoted.values().any(|&r| r == id)
    }

    /// Picks the least-loaded live instance of `pool` (lowest id on ties)
    /// and charges one unit of load to it.
    pub fn assign_and_balance(&mut self, pool: PoolId) -> Result<InstanceId, MiddleboxError> {
        let chosen = self
            .instances
            .values()
            .filter(|m| m.pool == pool && self.is_live(m.id) && !self.is_standby(m.id))
            .min_by_key(|m| (self.load(m.id), m.id))
            .map(|m| m.id)
            .ok_or(MiddleboxError::NoInstance(pool))?;
        *self.loads.entry(chosen).or_default() += 1;
        Ok(chosen)
    }

    /// Marks `id` failed and promotes its replica, which takes over its load.
    pub fn fail_and_swap(&mut self, id: InstanceId) -> Result<InstanceId, MiddleboxError> {
        if !self.instances.contains_key(&id) {
            return Err(MiddleboxError::UnknownInstance(id));
        }
        self.failed.insert(id);
        let replica = match self.replicas.get(&id) {
            Some(&r) if self.is_live(r) => r,
            _ => return Err(MiddleboxError::NoReplica(id)),
        };
        self.promoted.insert(id, replica);
        let load = self.loads.remove(&id).unwrap_or(0);
        *self.loads.entry(replica).or_default() += load;
        Ok(replica)
    }

    /// Follows swaps until a live instance is found.
    pub fn resolve(&self, id: InstanceId) -> Result<InstanceId, MiddleboxError> {
        let mut current = id;
        for _ in 0..=self.instances.len() {
            if self.is_live(current) {
                return Ok(current);
            }
            match self.promoted.get(&current) {
                Some(&next) => current = next,
                None => break,
            }
        }
        Err(MiddleboxError::InstanceUnavailable(id))
    }

    /// Evaluates `chain` on `input`. Stateful stages are copied to their
    /// standby replica after every inspection.
    pub fn eval_chain(
        &mut self,
        chain: &ServiceChain,
        input: &Inspection,
        mode: ChainMode,
    ) -> Result<ChainVerdict, MiddleboxError> {
        let resolved = chain
            .stages()
            .iter()
            .map(|&id| self.resolve(id).map(|r| (id, r)))
            .collect::<Result<Vec<_>, _>>()?;

        let mut stages = Vec::with_capacity(resolved.len());
        let mut verdict = Verdict::Allow;
        for (requested, id) in resolved {
            let mb = self.instances.get_mut(&id).expect("resolved instance exists");
            let outcome = mb.evaluate(input);
            let kind = mb.kind();
            self.sync_replica(id);
            stages.push(StageResult {
                requested,
                instance: id,
                kind,
                verdict: outcome.verdict,
                firewall_rule: outcome.firewall_rule,
            });
            if outcome.verdict == Verdict::Drop {
                verdict = Verdict::Drop;
                if mode == ChainMode::ShortCircuit {
                    break;
                }
            }
        }
        let deciding = stages
            .iter()
            .find(|s| s.verdict == Verdict::Drop)
            .or(stages.last())
            .map(|s| s.instance)
            .expect("chains are non-empty");
        Ok(ChainVerdict { verdict, deciding, stages })
    }

    fn sync_replica(&mut self, id: InstanceId) {
        let Some(&replica) = self.replicas.get(&id) else {
            return;
        };
        if self.failed.contains(&replica) {
            return;
        }
        let source = self.instances[&id].clone();
        if let Some(r) = self.instances.get_mut(&replica) {
            r.sync_from(&source);
        }
    }
}
