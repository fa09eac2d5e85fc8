// SPDX-License-Identifier: Apache-2.0

//! Per-segment, per-tick counters and their CSV form.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Column order of the metrics CSV.
pub const HEADER: [&str; 12] = [
    "segment",
    "tick",
    "attack_received",
    "attack_analyzed",
    "attack_dropped_local",
    "attack_allowed",
    "benign_received",
    "benign_analyzed",
    "benign_dropped_local",
    "benign_allowed",
    "css_requests_cumulative",
    "update_bytes",
];

/// One row per segment and tick. Every received flow is counted exactly
/// once: sent to the cloud (`analyzed`), or decided by the gateway itself
/// (`dropped_local` / `allowed`).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub segment: String,
    pub tick: u64,
    pub attack_received: u64,
    pub attack_analyzed: u64,
    pub attack_dropped_local: u64,
    pub attack_allowed: u64,
    pub benign_received: u64,
    pub benign_analyzed: u64,
    pub benign_dropped_local: u64,
    pub benign_allowed: u64,
    /// Requests the segment's gateway has sent to the cloud so far.
    pub css_requests_cumulative: u64,
    /// Bytes of update frames delivered to the gateway this tick.
    pub update_bytes: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SegmentTotals {
    pub attack_received: u64,
    pub attack_analyzed: u64,
    pub attack_dropped_local: u64,
    pub attack_allowed: u64,
    pub benign_received: u64,
    pub benign_analyzed: u64,
    pub benign_dropped_local: u64,
    pub benign_allowed: u64,
    pub css_requests: u64,
    pub update_bytes: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl SegmentTotals {
    pub fn attack_analyzed_fraction(&self) -> f64 {
        ratio(self.attack_analyzed, self.attack_received)
    }

    pub fn attack_dropped_fraction(&self) -> f64 {
        ratio(self.attack_dropped_local, self.attack_received)
    }
}

/// Rows in tick-major, then segment order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetricsSeries {
    pub rows: Vec<MetricsRow>,
}

impl MetricsSeries {
    /// Segment names in order of first appearance.
    pub fn segments(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.segment) {
                out.push(r.segment.clone());
            }
        }
        out
    }

    pub fn totals(&self) -> BTreeMap<String, SegmentTotals> {
        let mut out: BTreeMap<String, SegmentTotals> = BTreeMap::new();
        for r in &self.rows {
            let t = out.entry(r.segment.clone()).or_default();
            t.attack_received += r.attack_received;
            t.attack_analyzed += r.attack_analyzed;
            t.attack_dropped_local += r.attack_dropped_local;
            t.attack_allowed += r.attack_allowed;
            t.benign_received += r.benign_received;
            t.benign_analyzed += r.benign_analyzed;
            t.benign_dropped_local += r.benign_dropped_local;
            t.benign_allowed += r.benign_allowed;
            t.css_requests = t.css_requests.max(r.css_requests_cumulative);
            t.update_bytes += r.update_bytes;
        }
        out
    }

    pub fn segment_totals(&self, segment: &str) -> SegmentTotals {
        self.totals().remove(segment).unwrap_or_default()
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for row in &self.rows {
            w.serialize(row).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_csv())
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self, csv::Error> {
        let mut r = csv::Reader::from_reader(bytes);
        let headers = r.headers()?.clone();
        if headers.iter().ne(HEADER) {
            return Err(csv::Error::from(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
            )));
        }
        let rows = r.deserialize().collect::<Result<Vec<MetricsRow>, _>>()?;
        Ok(MetricsSeries { rows })
    }

    pub fn read_csv(path: &Path) -> Result<Self, csv::Error> {
        let bytes = std::fs::read(path)?;
        Self::from_csv(&bytes)
    }
}
