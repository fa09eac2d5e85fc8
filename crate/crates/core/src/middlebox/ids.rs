// SPDX-License-Identifier: Apache-2.0

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec::Vec;
use core::net::Ipv4Addr;

use super::Inspection;
use crate::flow::{MatchPattern, Verdict};
use crate::Tick;

/// Fires when more than `max_flows` flows from one source fall in the last
/// `window` ticks (the current tick included).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RateCondition {
    pub max_flows: u32,
    pub window: Tick,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdsSignature {
    pub pattern: MatchPattern,
    pub rate: Option<RateCondition>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdsConfig {
    pub signatures: Vec<IdsSignature>,
}

impl IdsConfig {
    fn horizon(&self) -> Tick {
        self.signatures
            .iter()
            .filter_map(|s| s.rate.map(|r| r.window))
            .max()
            .unwrap_or(0)
    }
}

/// Per-source arrival ticks of recently inspected flows.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdsState {
    history: BTreeMap<Ipv4Addr, VecDeque<Tick>>,
}

impl IdsState {
    fn record(&mut self, src: Ipv4Addr, tick: Tick, horizon: Tick) {
        let seen = self.history.entry(src).or_default();
        seen.push_back(tick);
        while seen.front().is_some_and(|&t| t + horizon <= tick) {
            seen.pop_front();
        }
    }

    fn count_since(&self, src: Ipv4Addr, tick: Tick, window: Tick) -> usize {
        self.history
            .get(&src)
            .map_or(0, |seen| seen.iter().filter(|&&t| t + window > tick).count())
    }
}

/// Records the flow, then drops it if any signature matches.
pub fn eval_ids(ids: &IdsConfig, state: &mut IdsState, input: &Inspection) -> Verdict {
    let horizon = ids.horizon();
    if horizon > 0 {
        state.record(input.flow.src_addr, input.tick, horizon);
    }
    let fired = ids.signatures.iter().any(|sig| {
        sig.pattern.matches(&input.flow)
            && sig.rate.is_none_or(|rate| {
                state.count_since(input.flow.src_addr, input.tick, rate.window) > rate.max_flows as usize
            })
    });
    if fired {
        Verdict::Drop
    } else {
        Verdict::Allow
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{proto, DeviceId, FlowMetadata};
    use alloc::vec;

    fn at(src: [u8; 4], dst_port: u16, tick: Tick) -> Inspection {
        Inspection {
            flow: FlowMetadata::tcp(src.into(), 1000, [10, 0, 0, 2].into(), dst_port, DeviceId(1)),
            tag: 0,
            tick,
        }
    }

    #[test]
    fn no_signatures_allows() {
        let mut st = IdsState::default();
        assert_eq!(eval_ids(&IdsConfig::default(), &mut st, &at([1, 1, 1, 1], 23, 0)), Verdict::Allow);
    }

    #[test]
    fn telnet_signature() {
        let ids = IdsConfig {
            signatures: vec![IdsSignature {
                pattern: MatchPattern::ANY.with_protocol(proto::TCP).with_dst_port(23),
                rate: None,
            }],
        };
        let mut st = IdsState::default();
        assert_eq!(eval_ids(&ids, &mut st, &at([1, 1, 1, 1], 23, 0)), Verdict::Drop);
        assert_eq!(eval_ids(&ids, &mut st, &at([1, 1, 1, 1], 22, 0)), Verdict::Allow);
    }

    #[test]
    fn rate_signature_fires_on_sixth_flow() {
        let ids = IdsConfig {
            signatures: vec![IdsSignature {
                pattern: MatchPattern::ANY,
                rate: Some(RateCondition { max_flows: 5, window: 10 }),
            }],
        };
        let mut st = IdsState::default();
        let verdicts: Vec<_> = (0..6).map(|i| eval_ids(&ids, &mut st, &at([6, 6, 6, 6], 80, i))).collect();
        assert_eq!(&verdicts[..5], &[Verdict::Allow; 5]);
        assert_eq!(verdicts[5], Verdict::Drop);
        // another source is unaffected
        assert_eq!(eval_ids(&ids, &mut st, &at([7, 7, 7, 7], 80, 5)), Verdict::Allow);
        // once the window slides past, the source is quiet again
        assert_eq!(eval_ids(&ids, &mut st, &at([6, 6, 6, 6], 80, 40)), Verdict::Allow);
    }
}
