// SPDX-License-Identifier: Apache-2.0

//! JSON-lines analytics summary of a run.

use serde_json::{json, Value};

use edgeguard_core::cloud::Scope;

use crate::sim::RunOutput;

fn scope_str(scope: Scope) -> String {
    match scope {
        Scope::Global => "global".into(),
        Scope::Box(b) => format!("box-{}", b.0),
    }
}

/// One JSON object per line: a run summary, one line per segment, then
/// detections, blacklist events, rogue reports and the busiest remotes.
pub fn analytics_lines(out: &RunOutput) -> Vec<Value> {
    let a = &out.analytics;
    let mut lines = vec![json!({
        "type": "summary",
        "reports": a.reports,
        "excluded_reports": a.excluded_reports,
        "flows": a.flows,
        "drops": a.drops,
        "detections": out.detections.len(),
        "blacklisted": out.blacklist.len(),
        "rogue_reports": a.rogue_reports.len(),
        "update_emissions": out.emissions.len(),
        "requests": out.css.request_log().len(),
        "stored_policies": out.css.store().len(),
    })];
    for (name, t) in out.metrics.totals() {
        lines.push(json!({
            "type": "segment",
            "segment": name,
            "attack_received": t.attack_received,
            "attack_analyzed": t.attack_analyzed,
            "attack_dropped_local": t.attack_dropped_local,
            "attack_allowed": t.attack_allowed,
            "benign_received": t.benign_received,
            "benign_analyzed": t.benign_analyzed,
            "benign_dropped_local": t.benign_dropped_local,
            "benign_allowed": t.benign_allowed,
            "css_requests": t.css_requests,
            "update_bytes": t.update_bytes,
        }));
    }
    for d in &out.detections {
        lines.push(json!({
            "type": "detection",
            "tick": d.tick,
            "source": d.source.to_string(),
            "scope": scope_str(d.scope),
            "policy": d.policy.0,
        }));
    }
    for b in &out.blacklist {
        lines.push(json!({
            "type": "blacklist",
            "tick": b.tick,
            "box": b.box_id.0,
            "reason": b.reason.as_str(),
        }));
    }
    for r in &a.rogue_reports {
        lines.push(json!({
            "type": "rogue_report",
            "tick": r.tick,
            "box": r.box_id.0,
            "source": r.source.to_string(),
        }));
    }
    for (addr, count) in a.top_contacts(10) {
        lines.push(json!({ "type": "contact", "remote": addr.to_string(), "count": count }));
    }
    lines
}

pub fn analytics_jsonl(out: &RunOutput) -> String {
    let mut s = String::new();
    for line in analytics_lines(out) {
        s.push_str(&line.to_string());
        s.push('\n');
    }
    s
}
