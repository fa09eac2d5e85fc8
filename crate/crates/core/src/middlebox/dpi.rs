// SPDX-License-Identifier: Apache-2.0

use alloc::collections::BTreeSet;

use super::Inspection;
use crate::flow::Verdict;

/// Payloads are not modelled; flows carry an opaque content tag instead.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DpiConfig {
    pub banned: BTreeSet<u8>,
}

pub fn eval_dpi(dpi: &DpiConfig, input: &Inspection) -> Verdict {
    if input.tag != 0 && dpi.banned.contains(&input.tag) {
        Verdict::Drop
    } else {
        Verdict::Allow
    }
}
