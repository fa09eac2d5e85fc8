// SPDX-License-Identifier: Apache-2.0

//! Policy enforcement core for cloud-assisted edge gateways.
//!
//! The crate is `no_std` (it needs `alloc`) and free of IO. It holds the
//! pieces that both sides of the system share:
//!
//! * [`flow`] and [`policy`]: flow identity, wildcard match patterns and
//!   security policies.
//! * [`wire`]: the canonical big-endian encodings exchanged between gateways
//!   and the cloud service, including the 27-byte analysis request.
//! * [`poldb`]: the gateway-local policy database.
//! * [`trust`]: certificate authority, signing and verification.
//! * [`middlebox`]: firewall / IDS / DPI instances, service chains and the
//!   middlebox manager.
//! * [`gateway`]: the edge gateway state machine.
//! * [`cloud`]: the cloud security service, including update dissemination,
//!   port-scan detection, blacklisting and primary/backup replication.
//!
//! Time is modelled as integer ticks supplied by the caller.

#![cfg_attr(not(test), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod cloud;
pub mod flow;
pub mod gateway;
pub mod middlebox;
pub mod poldb;
pub mod policy;
pub mod trust;
pub mod wire;

/// Simulation time in ticks.
pub type Tick = u64;

/// Inclusive tick range `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TickWindow {
    pub start: Tick,
    pub end: Tick,
}

impl TickWindow {
    pub const fn new(start: Tick, end: Tick) -> Self {
        TickWindow { start, end }
    }

    pub fn contains(&self, tick: Tick) -> bool {
        self.start <= tick && tick <= self.end
    }
}

pub use flow::{BoxId, DeviceId, FlowMetadata, MatchPattern, Verdict};
pub use policy::{Issuer, PolicyId, Priority, SecurityPolicy};
