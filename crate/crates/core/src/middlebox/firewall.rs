// SPDX-License-Identifier: Apache-2.0

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::net::Ipv4Addr;

use crate::flow::{FlowMetadata, MatchPattern, Verdict};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FirewallRule {
    pub pattern: MatchPattern,
    pub verdict: Verdict,
}

/// Known-server allowlist plus an ordered, first-match rule list.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FirewallConfig {
    pub allowlist: BTreeSet<Ipv4Addr>,
    pub rules: Vec<FirewallRule>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FirewallDecision {
    pub verdict: Verdict,
    /// Index of the rule that decided, `None` for allowlisted or unmatched
    /// flows.
    pub rule: Option<usize>,
}

impl FirewallConfig {
    pub fn evaluate(&self, flow: &FlowMetadata) -> FirewallDecision {
        if self.allowlist.contains(&flow.dst_addr) {
            return FirewallDecision { verdict: Verdict::Allow, rule: None };
        }
        self.rules
            .iter()
            .position(|r| r.pattern.matches(flow))
            .map_or(FirewallDecision { verdict: Verdict::Allow, rule: None }, |i| {
                FirewallDecision { verdict: self.rules[i].verdict, rule: Some(i) }
            })
    }
}

pub fn eval_firewall(fw: &FirewallConfig, flow: &FlowMetadata) -> Verdict {
    fw.evaluate(flow).verdict
}
