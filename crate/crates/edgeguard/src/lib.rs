// SPDX-License-Identifier: Apache-2.0

//! Simulator and tooling around `edgeguard-core`: TOML scenarios, a seeded
//! discrete-event network simulation, CSV metrics and JSON-lines analytics.

pub mod export;
pub mod metrics;
pub mod scenario;
pub mod sim;
pub mod traffic;

pub use metrics::{MetricsRow, MetricsSeries, SegmentTotals};
pub use scenario::{Scenario, ScenarioError};
pub use sim::{replay_check, run_scenario, RunOutput, SimError};

/// Scenario files shipped with the crate, by file stem.
pub fn bundled_scenario(name: &str) -> Option<&'static str> {
    match name {
        "canonical" => Some(include_str!("../scenarios/canonical.toml")),
        "failover" => Some(include_str!("../scenarios/failover.toml")),
        "security" => Some(include_str!("../scenarios/security.toml")),
        "cctv" => Some(include_str!("../scenarios/cctv.toml")),
        "outage" => Some(include_str!("../scenarios/outage.toml")),
        _ => None,
    }
}

pub const BUNDLED: [&str; 5] = ["canonical", "failover", "security", "cctv", "outage"];
