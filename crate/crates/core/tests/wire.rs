// SPDX-License-Identifier: Apache-2.0

use std::net::Ipv4Addr;

use edgeguard_core::flow::DeviceId;
use edgeguard_core::trust::Keypair;
use edgeguard_core::wire::{
    self, AnalysisRequest, MessageType, PolicyUpdate, UpdateTier, WireError, REQUEST_LEN,
};
use edgeguard_core::{BoxId, FlowMetadata, MatchPattern, PolicyId, Priority, SecurityPolicy, Verdict};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const _: () = assert!(REQUEST_LEN == 27);
const _: () = assert!(REQUEST_LEN < 40);

fn random_request(rng: &mut ChaCha8Rng) -> AnalysisRequest {
    AnalysisRequest {
        box_id: BoxId(rng.gen()),
        request_id: rng.gen(),
        metadata: FlowMetadata {
            src_addr: Ipv4Addr::from(rng.gen::<u32>()),
            dst_addr: Ipv4Addr::from(rng.gen::<u32>()),
            src_port: rng.gen(),
            dst_port: rng.gen(),
            protocol: rng.gen(),
            device_id: DeviceId(rng.gen()),
        },
        content_tag: rng.gen(),
        reserved: rng.gen(),
    }
}

/// Field-by-field big-endian layout written out by hand.
fn reference_encoding(r: &AnalysisRequest) -> Vec<u8> {
    let m = &r.metadata;
    let mut v = Vec::new();
    v.extend(r.box_id.0.to_be_bytes());
    v.extend(r.request_id.to_be_bytes());
    v.extend(m.src_addr.octets());
    v.extend(m.dst_addr.octets());
    v.extend(m.src_port.to_be_bytes());
    v.extend(m.dst_port.to_be_bytes());
    v.push(m.protocol);
    v.extend(m.device_id.0.to_be_bytes());
    v.push(r.content_tag);
    v.extend(r.reserved);
    v
}

#[test]
fn request_round_trip_over_ten_thousand_random_requests() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x27);
    for _ in 0..10_000 {
        let req = random_request(&mut rng);
        let bytes = wire::encode_request(&req);
        assert_eq!(bytes.len(), 27);
        assert_eq!(bytes.as_slice(), reference_encoding(&req).as_slice());
        assert_eq!(wire::decode_request(&bytes).unwrap(), req);
    }
}

#[test]
fn request_of_wrong_length_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bytes = wire::encode_request(&random_request(&mut rng));
    for len in [0, 26, 28] {
        let mut v = bytes.to_vec();
        v.resize(len, 0);
        assert!(matches!(wire::decode_request(&v), Err(WireError::WrongLength { .. })));
    }
}

fn policy(id: u64, dst_port: u16, priority: Priority) -> SecurityPolicy {
    SecurityPolicy::css(
        PolicyId(id),
        MatchPattern::ANY.with_dst_port(dst_port),
        Verdict::Drop,
        priority,
        id * 3,
    )
}

#[test]
fn update_round_trip_and_truncation() {
    let update = PolicyUpdate {
        box_id: BoxId(4),
        seq: 9,
        tier: UpdateTier::High,
        policies: vec![policy(1, 23, Priority::High), policy(2, 2323, Priority::High)],
    };
    let bytes = update.encode();
    assert_eq!(bytes.len(), 17 + 2 * wire::POLICY_LEN);
    assert_eq!(PolicyUpdate::decode(&bytes).unwrap(), update);
    for cut in 0..bytes.len() {
        assert!(PolicyUpdate::decode(&bytes[..cut]).is_err(), "prefix of {cut} bytes accepted");
    }
}

#[test]
fn frame_signature_covers_every_byte() {
    let keys = Keypair::from_secret([5; 32]);
    let payload = wire::encode_request(&AnalysisRequest::new(
        BoxId(1),
        7,
        FlowMetadata::tcp([10, 0, 0, 2].into(), 5000, [198, 51, 100, 1].into(), 443, DeviceId(1)),
        0,
    ));
    let frame = wire::encode_frame(MessageType::Request, &payload, |m| keys.sign(m));
    assert_eq!(frame.len(), 4 + 1 + 27 + 64);
    let pk = keys.public_key();
    let ok = |f: &[u8]| {
        wire::decode_frame(f).is_ok_and(|raw| edgeguard_core::trust::verify_raw(&pk, raw.signed, &raw.signature))
    };
    assert!(ok(&frame));
    for i in 0..frame.len() {
        let mut bad = frame.clone();
        bad[i] ^= 0x40;
        assert!(!ok(&bad), "flipping byte {i} went unnoticed");
    }
}

prop_compose! {
    fn arb_pattern()(
        src in proptest::option::of(any::<u32>()),
        dst in proptest::option::of(any::<u32>()),
        sp in proptest::option::of(any::<u16>()),
        dp in proptest::option::of(any::<u16>()),
        proto in proptest::option::of(any::<u8>()),
        dev in proptest::option::of(any::<u16>()),
    ) -> MatchPattern {
        MatchPattern {
            src_addr: src.map(Ipv4Addr::from),
            dst_addr: dst.map(Ipv4Addr::from),
            src_port: sp,
            dst_port: dp,
            protocol: proto,
            device_id: dev.map(DeviceId),
        }
    }
}

proptest! {
    #[test]
    fn policy_encoding_is_canonical(
        id in any::<u64>(),
        pattern in arb_pattern(),
        drop in any::<bool>(),
        manual in any::<bool>(),
        high in any::<bool>(),
        at in any::<u64>(),
    ) {
        let verdict = if drop { Verdict::Drop } else { Verdict::Allow };
        let p = if manual {
            SecurityPolicy::manual(PolicyId(id), pattern, verdict, at)
        } else {
            let prio = if high { Priority::High } else { Priority::Normal };
            SecurityPolicy::css(PolicyId(id), pattern, verdict, prio, at)
        };
        let mut bytes = Vec::new();
        wire::encode_policy(&p, &mut bytes);
        prop_assert_eq!(bytes.len(), wire::POLICY_LEN);
        let back = wire::decode_policy(&bytes).unwrap();
        prop_assert_eq!(back, p);
        let mut again = Vec::new();
        wire::encode_policy(&back, &mut again);
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let _ = wire::decode_request(&bytes);
        let _ = wire::decode_policy(&bytes);
        let _ = wire::decode_frame(&bytes);
        let _ = PolicyUpdate::decode(&bytes);
        let _ = wire::SensorReport::decode(&bytes);
        let _ = wire::RogueReport::decode(&bytes);
    }
}
