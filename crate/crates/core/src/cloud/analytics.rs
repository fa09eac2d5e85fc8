// SPDX-License-Identifier: Apache-2.0

//! Cross-network traffic statistics folded from gateway sensor reports.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::net::Ipv4Addr;

use crate::flow::BoxId;
use crate::wire::{RogueReport, SensorReport};

/// Running totals over every report accepted from a sharing subscriber.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnalyticsSummary {
    pub reports: u64,
    pub flows: u64,
    pub drops: u64,
    /// Per remote address: number of (report, device) pairs that contacted it.
    pub contacts: BTreeMap<Ipv4Addr, u64>,
    /// Per address: number of times a gateway flagged it as suspicious.
    pub suspicious: BTreeMap<Ipv4Addr, u64>,
    /// Reports received from subscribers that opted out, counted only.
    pub excluded_reports: u64,
    pub rogue_reports: Vec<RogueReport>,
}

impl AnalyticsSummary {
    /// Folds one report in. Reports from opted-out subscribers only bump
    /// `excluded_reports`.
    pub fn merge(&mut self, report: &SensorReport, shared: bool) {
        if !shared {
            self.excluded_reports += 1;
            return;
        }
        self.reports += 1;
        for d in &report.devices {
            self.flows += u64::from(d.flows);
            self.drops += u64::from(d.drops);
            for addr in &d.remotes {
                *self.contacts.entry(*addr).or_default() += 1;
            }
        }
        for s in &report.suspicious {
            *self.suspicious.entry(s.addr).or_default() += 1;
        }
    }

    pub fn top_contacts(&self, n: usize) -> Vec<(Ipv4Addr, u64)> {
        let mut v: Vec<_> = self.contacts.iter().map(|(a, c)| (*a, *c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v.truncate(n);
        v
    }

    pub fn rogue_sources(&self) -> BTreeMap<Ipv4Addr, Vec<BoxId>> {
        let mut out: BTreeMap<Ipv4Addr, Vec<BoxId>> = BTreeMap::new();
        for r in &self.rogue_reports {
            out.entry(r.source).or_default().push(r.box_id);
        }
        out
    }
}
