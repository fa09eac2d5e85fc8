// SPDX-License-Identifier: Apache-2.0

//! Sliding-window port-scan detection.
//!
//! A remote source is flagged once it has probed at least
//! `distinct_targets` distinct `(destination, port)` pairs within the last
//! `window` ticks.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;
use core::net::Ipv4Addr;

use crate::flow::BoxId;
use crate::Tick;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanThresholds {
    pub distinct_targets: usize,
    pub window: Tick,
}

impl Default for ScanThresholds {
    fn default() -> Self {
        ScanThresholds {
            distinct_targets: 10,
            window: 50,
        }
    }
}

/// Whose traffic a detection is drawn from. With collaboration on, all
/// sharing subscribers feed one global view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    Global,
    Box(BoxId),
}

pub type Target = (Ipv4Addr, u16);

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct SourceWindow {
    probes: VecDeque<(Tick, Target)>,
    distinct: BTreeMap<Target, u32>,
}

impl SourceWindow {
    fn push(&mut self, tick: Tick, target: Target) {
        self.probes.push_back((tick, target));
        *self.distinct.entry(target).or_default() += 1;
    }

    fn prune(&mut self, now: Tick, window: Tick) {
        while let Some(&(t, target)) = self.probes.front() {
            if t + window > now {
                break;
            }
            self.probes.pop_front();
            if let Some(n) = self.distinct.get_mut(&target) {
                *n -= 1;
                if *n == 0 {
                    self.distinct.remove(&target);
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScanTracker {
    thresholds: ScanThresholds,
    windows: BTreeMap<(Scope, Ipv4Addr), SourceWindow>,
    detected: BTreeSet<(Scope, Ipv4Addr)>,
}

impl ScanTracker {
    pub fn new(thresholds: ScanThresholds) -> Self {
        ScanTracker {
            thresholds,
            ..Default::default()
        }
    }

    pub fn thresholds(&self) -> ScanThresholds {
        self.thresholds
    }

    /// Records a probe; sources already detected in `scope` are ignored.
    pub fn observe(&mut self, scope: Scope, src: Ipv4Addr, target: Target, tick: Tick) {
        if self.detected.contains(&(scope, src)) {
            return;
        }
        self.windows.entry((scope, src)).or_default().push(tick, target);
    }

    pub fn is_detected(&self, scope: Scope, src: Ipv4Addr) -> bool {
        self.detected.contains(&(scope, src))
    }

    /// Returns newly detected `(scope, source)` pairs for the window ending
    /// at `now`, in ascending order.
    pub fn detect(&mut self, now: Tick) -> Vec<(Scope, Ipv4Addr)> {
        let ScanThresholds { distinct_targets, window } = self.thresholds;
        let mut found = Vec::new();
        self.windows.retain(|key, w| {
            w.prune(now, window);
            if w.distinct.len() >= distinct_targets {
                found.push(*key);
                return false;
            }
            !w.probes.is_empty()
        });
        self.detected.extend(found.iter().copied());
        found
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn src() -> Ipv4Addr {
        Ipv4Addr::new(66, 0, 0, 1)
    }

    #[test]
    fn below_threshold_not_detected() {
        let mut t = ScanTracker::new(ScanThresholds::default());
        for port in 0..9 {
            t.observe(Scope::Global, src(), ([10, 0, 0, 1].into(), port), 1);
        }
        assert!(t.detect(1).is_empty());
        t.observe(Scope::Global, src(), ([10, 0, 0, 1].into(), 9), 2);
        assert_eq!(t.detect(2), [(Scope::Global, src())]);
        assert!(t.is_detected(Scope::Global, src()));
        assert!(t.detect(3).is_empty());
    }

    #[test]
    fn repeated_targets_count_once() {
        let mut t = ScanTracker::new(ScanThresholds::default());
        for _ in 0..50 {
            t.observe(Scope::Global, src(), ([10, 0, 0, 1].into(), 80), 1);
        }
        assert!(t.detect(1).is_empty());
    }

    #[test]
    fn old_probes_slide_out() {
        let mut t = ScanTracker::new(ScanThresholds { distinct_targets: 10, window: 50 });
        for port in 0..5 {
            t.observe(Scope::Global, src(), ([10, 0, 0, 1].into(), port), 0);
        }
        for port in 5..10 {
            t.observe(Scope::Global, src(), ([10, 0, 0, 1].into(), port), 50);
        }
        // tick 0 is outside (0, 50]
        assert!(t.detect(50).is_empty());
    }

    #[test]
    fn scopes_are_independent() {
        let mut t = ScanTracker::new(ScanThresholds::default());
        for port in 0..10 {
            let scope = if port % 2 == 0 { Scope::Box(BoxId(1)) } else { Scope::Box(BoxId(2)) };
            t.observe(scope, src(), ([10, 0, 0, 1].into(), port), 1);
        }
        assert!(t.detect(1).is_empty());
    }
}
