// SPDX-License-Identifier: Apache-2.0

mod common;

use std::net::Ipv4Addr;

use common::{box_id, inbound, outbound, Fixture};
use edgeguard_core::cloud::{Audience, CloudConfig, CloudService, FrameOutcome, Outbound};
use edgeguard_core::gateway::{CssLink, FlowDecision, Gateway, GatewayError, ReleaseCause};
use edgeguard_core::trust::Keypair;
use edgeguard_core::wire::{self, MessageType, PolicyUpdate, UpdateTier};
use edgeguard_core::{FlowMetadata, MatchPattern, PolicyId, Priority, SecurityPolicy, Tick, Verdict};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CSS: Ipv4Addr = Ipv4Addr::new(203, 0, 113, 10);
const ROGUE: Ipv4Addr = Ipv4Addr::new(203, 0, 113, 66);

/// Delivers every queued frame in both directions until both sides are
/// quiet.
fn settle(css: &mut CloudService, gw: &mut Gateway, now: Tick) {
    loop {
        let up = gw.drain_outbox();
        for f in &up {
            let _ = css.handle_frame(gw.box_id(), &f.0, now);
        }
        let down: Vec<Outbound> = css.drain_outbox();
        for o in &down {
            match o.kind {
                MessageType::Response => {
                    gw.on_response(&o.frame, CSS, now).unwrap();
                }
                MessageType::Update => {
                    gw.receive_update(&o.frame, CSS, now).unwrap();
                }
                other => panic!("unexpected {other:?}"),
            }
        }
        if up.is_empty() && down.is_empty() {
            break;
        }
    }
}

#[test]
fn cached_flows_cost_zero_messages() {
    let mut fx = Fixture::new(1, CloudConfig::default());
    let mut gw = fx.gateway(0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let flows: Vec<FlowMetadata> = (0..50u8)
        .map(|i| {
            if i % 2 == 0 {
                outbound(0, 1 + i % 3, Ipv4Addr::new(198, 51, 100, i), if i % 5 == 0 { 23 } else { 443 })
            } else {
                inbound(0, Ipv4Addr::new(192, 0, 2, i), 1 + i % 3, 8080)
            }
        })
        .collect();
    for (t, flow) in flows.iter().enumerate() {
        // later telnet flows already hit the general rule cached for the first
        gw.process_flow(*flow, 0, t as Tick);
        settle(&mut fx.css, &mut gw, t as Tick);
    }
    let css_requests = fx.css.request_log().len();
    let first: Vec<Verdict> = flows.iter().map(|f| gw.db().lookup(f).verdict().unwrap()).collect();

    // replay 10^3 flows drawn from the cached set, with fresh source ports
    for i in 0..1000 {
        let k = rng.gen_range(0..flows.len());
        let flow = FlowMetadata { src_port: rng.gen(), ..flows[k] };
        let d = gw.process_flow(flow, 0, 100 + i);
        assert_eq!(d, FlowDecision::Verdict(first[k]));
        assert!(gw.drain_outbox().is_empty(), "cached flow {i} produced a message");
    }
    assert_eq!(gw.pending_len(), 0);
    assert_eq!(fx.css.request_log().len(), css_requests);
}

#[test]
fn manual_policy_beats_cloud_policy() {
    let mut fx = Fixture::new(1, CloudConfig::default());
    let mut gw = fx.gateway(0);
    let dst = Ipv4Addr::new(198, 51, 100, 20);
    fx.css.publish_policy(MatchPattern::ANY.with_dst_addr(dst), Verdict::Drop, Priority::High, Audience::All, 0);
    fx.css.tick(0);
    settle(&mut fx.css, &mut gw, 0);
    let flow = outbound(0, 1, dst, 443);
    assert_eq!(gw.process_flow(flow, 0, 1), FlowDecision::Verdict(Verdict::Drop));
    // a less specific manual allow still wins
    gw.add_manual_policy(MatchPattern::ANY.with_device(flow.device_id), Verdict::Allow, 2);
    assert_eq!(gw.process_flow(flow, 0, 3), FlowDecision::Verdict(Verdict::Allow));
}

#[test]
fn offline_gateway_applies_defaults_without_messages() {
    let fx = Fixture::new(1, CloudConfig::default());
    let mut gw = fx.gateway(0);
    gw.set_link(CssLink::Disconnected);
    let into = inbound(0, Ipv4Addr::new(192, 0, 2, 1), 1, 22);
    let out = outbound(0, 1, Ipv4Addr::new(198, 51, 100, 1), 443);
    assert_eq!(gw.process_flow(into, 0, 0), FlowDecision::Verdict(Verdict::Drop));
    assert_eq!(gw.process_flow(out, 0, 0), FlowDecision::Verdict(Verdict::Allow));
    assert!(gw.drain_outbox().is_empty());
    // nothing was cached: back online, the same flow goes to the cloud
    gw.set_link(CssLink::Connected);
    assert!(matches!(gw.process_flow(into, 0, 1), FlowDecision::CloudPending(_)));
}

#[test]
fn parked_flow_times_out_to_default() {
    let fx = Fixture::new(1, CloudConfig::default());
    let mut gw = fx.gateway(0);
    let into = inbound(0, Ipv4Addr::new(192, 0, 2, 1), 1, 22);
    let FlowDecision::CloudPending(req) = gw.process_flow(into, 0, 10) else { panic!("expected a request") };
    assert!(gw.expire(11).is_empty());
    let released = gw.expire(12);
    assert_eq!(released.len(), 1);
    assert_eq!((released[0].request_id, released[0].verdict, released[0].cause), (req.request_id, Verdict::Drop, ReleaseCause::Timeout));
}

fn forged_update(fx: &Fixture, keys: &Keypair, seq: u64) -> Vec<u8> {
    let p = SecurityPolicy::css(PolicyId(900 + seq), MatchPattern::ANY, Verdict::Allow, Priority::High, 0);
    let update = PolicyUpdate { box_id: box_id(0), seq, tier: UpdateTier::High, policies: vec![p] };
    let _ = fx;
    wire::encode_frame(MessageType::Update, &update.encode(), |m| keys.sign(m))
}

#[test]
fn every_foreign_signed_update_is_rejected_and_reported() {
    let mut fx = Fixture::new(1, CloudConfig::default());
    let mut gw = fx.gateway(0);
    let before = gw.db().snapshot();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..100 {
        let keys = Keypair::from_secret(rng.gen());
        let frame = forged_update(&fx, &keys, i);
        assert_eq!(gw.receive_update(&frame, ROGUE, i), Err(GatewayError::BadSignature));
        let out = gw.drain_outbox();
        assert_eq!(out.len(), 1);
        let raw = wire::decode_frame(&out[0].0).unwrap();
        assert_eq!(raw.kind, MessageType::RogueReport);
        match fx.css.handle_frame(box_id(0), &out[0].0, i) {
            Ok(FrameOutcome::RogueRecorded(r)) => assert_eq!((r.source, r.box_id), (ROGUE, box_id(0))),
            other => panic!("{other:?}"),
        }
    }
    assert_eq!(gw.db().snapshot(), before);
    assert_eq!(fx.css.analytics().rogue_reports.len(), 100);
    assert_eq!(fx.css.analytics().rogue_sources()[&ROGUE].len(), 100);
}

#[test]
fn update_signed_by_another_gateway_is_rejected() {
    let fx = Fixture::new(2, CloudConfig::default());
    let mut gw = fx.gateway(0);
    let frame = forged_update(&fx, &fx.boxes[1].0, 1);
    assert_eq!(gw.receive_update(&frame, ROGUE, 0), Err(GatewayError::BadSignature));
    assert!(gw.db().is_empty());
}

#[test]
fn response_for_wrong_flow_is_refused() {
    let mut fx = Fixture::new(1, CloudConfig::default());
    let mut gw = fx.gateway(0);
    let flow = outbound(0, 1, Ipv4Addr::new(198, 51, 100, 1), 443);
    let FlowDecision::CloudPending(req) = gw.process_flow(flow, 0, 0) else { panic!() };
    // the cloud answers a different flow under the same request id
    let other = wire::AnalysisRequest { metadata: FlowMetadata { dst_port: 80, ..flow }, ..req };
    fx.css.handle_request(&other, 0).unwrap();
    let resp = fx.css.drain_outbox().pop().unwrap();
    assert_eq!(gw.on_response(&resp.frame, CSS, 0), Err(GatewayError::PolicyMismatch));
    assert_eq!(gw.pending_len(), 1);
}

#[test]
fn sensor_report_summarizes_log() {
    let mut fx = Fixture::new(1, CloudConfig::default());
    let mut gw = fx.gateway(0);
    gw.set_link(CssLink::Disconnected);
    for i in 0..6u8 {
        gw.process_flow(inbound(0, Ipv4Addr::new(192, 0, 2, i % 2), 1, 22), 0, u64::from(i));
    }
    gw.process_flow(outbound(0, 1, Ipv4Addr::new(198, 51, 100, 1), 443), 0, 6);
    let report = gw.emit_sensor_report(edgeguard_core::TickWindow::new(0, 9));
    assert_eq!(report.devices.len(), 1);
    assert_eq!((report.devices[0].flows, report.devices[0].drops), (7, 6));
    assert_eq!(report.devices[0].remotes.len(), 3);
    let rank = gw.security_rank(edgeguard_core::DeviceId(1), edgeguard_core::TickWindow::new(0, 9));
    assert!((rank - 100.0 / 7.0).abs() < 1e-9);
    let frame = gw.drain_outbox().pop().unwrap();
    assert_eq!(fx.css.handle_frame(box_id(0), &frame.0, 10), Ok(FrameOutcome::ReportMerged));
    assert_eq!(fx.css.analytics().drops, 6);
}
