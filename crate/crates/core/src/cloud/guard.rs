// SPDX-License-Identifier: Apache-2.0

//! Rogue-gateway detection: repeated identical requests and malformed or
//! unverifiable frames.

use alloc::collections::{BTreeMap, VecDeque};

use crate::flow::{BoxId, FlowMetadata};
use crate::Tick;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AbuseThresholds {
    /// A box sending more than this many identical requests inside
    /// `window` is blacklisted.
    pub repeats: usize,
    pub window: Tick,
    /// Number of malformed or badly signed frames that blacklists a box.
    pub malformed: u32,
}

impl Default for AbuseThresholds {
    fn default() -> Self {
        AbuseThresholds {
            repeats: 5,
            window: 50,
            malformed: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlacklistReason {
    RepeatedRequests,
    MalformedFrames,
    Revoked,
}

impl BlacklistReason {
    pub fn as_str(self) -> &'static str {
        match self {
            BlacklistReason::RepeatedRequests => "repeated-requests",
            BlacklistReason::MalformedFrames => "malformed-frames",
            BlacklistReason::Revoked => "revoked",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlacklistEvent {
    pub box_id: BoxId,
    pub tick: Tick,
    pub reason: BlacklistReason,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AbuseGuard {
    thresholds: AbuseThresholds,
    recent: BTreeMap<(BoxId, FlowMetadata), VecDeque<Tick>>,
    malformed: BTreeMap<BoxId, u32>,
}

impl AbuseGuard {
    pub fn new(thresholds: AbuseThresholds) -> Self {
        AbuseGuard {
            thresholds,
            ..Default::default()
        }
    }

    pub fn thresholds(&self) -> AbuseThresholds {
        self.thresholds
    }

    /// Counts one request; true when the box crossed the repeat threshold.
    pub fn observe_request(&mut self, box_id: BoxId, metadata: FlowMetadata, tick: Tick) -> bool {
        let window = self.thresholds.window;
        let ticks = self.recent.entry((box_id, metadata)).or_default();
        while ticks.front().is_some_and(|&t| t + window <= tick) {
            ticks.pop_front();
        }
        ticks.push_back(tick);
        ticks.len() > self.thresholds.repeats
    }

    /// Counts one bad frame; true when the box reached the malformed limit.
    pub fn observe_malformed(&mut self, box_id: BoxId) -> bool {
        let n = self.malformed.entry(box_id).or_default();
        *n += 1;
        *n >= self.thresholds.malformed
    }

    pub fn malformed_count(&self, box_id: BoxId) -> u32 {
        self.malformed.get(&box_id).copied().unwrap_or(0)
    }

    /// Drops request history that can no longer contribute to a decision.
    pub fn prune(&mut self, now: Tick) {
        let window = self.thresholds.window;
        self.recent.retain(|_, ticks| {
            while ticks.front().is_some_and(|&t| t + window <= now) {
                ticks.pop_front();
            }
            !ticks.is_empty()
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeat_boundary() {
        let mut g = AbuseGuard::new(AbuseThresholds::default());
        let flow = FlowMetadata::ZERO;
        for t in 0..5 {
            assert!(!g.observe_request(BoxId(1), flow, t));
        }
        assert!(g.observe_request(BoxId(1), flow, 5));
    }

    #[test]
    fn repeats_outside_window_forgotten() {
        let mut g = AbuseGuard::new(AbuseThresholds::default());
        let flow = FlowMetadata::ZERO;
        for t in 0..5 {
            assert!(!g.observe_request(BoxId(1), flow, t * 20));
        }
        assert!(!g.observe_request(BoxId(1), flow, 100));
    }

    #[test]
    fn malformed_limit() {
        let mut g = AbuseGuard::new(AbuseThresholds::default());
        assert!(!g.observe_malformed(BoxId(2)));
        assert!(!g.observe_malformed(BoxId(2)));
        assert!(g.observe_malformed(BoxId(2)));
    }
}
