// SPDX-License-Identifier: Apache-2.0

//! Canonical big-endian encodings exchanged between gateways and the cloud
//! service.
//!
//! Analysis requests are a fixed 27-byte record:
//!
//! ```text
//! offset  size  field
//!      0     4  box_id
//!      4     4  request_id
//!      8     4  src_addr
//!     12     4  dst_addr
//!     16     2  src_port
//!     18     2  dst_port
//!     20     1  protocol
//!     21     2  device_id
//!     23     1  flags (opaque content tag, 0 = untagged)
//!     24     3  reserved
//! ```
//!
//! Every message travels in a frame:
//!
//! ```text
//! u32 length | u8 message type | payload | 64-byte signature
//! ```
//!
//! `length` counts everything after itself. The signature covers the length,
//! the type byte and the payload.

use alloc::vec::Vec;
use core::net::Ipv4Addr;

use thiserror::Error;

use crate::flow::{BoxId, DeviceId, FlowMetadata, MatchPattern, Verdict};
use crate::policy::{Issuer, PolicyId, Priority, SecurityPolicy};
use crate::{Tick, TickWindow};

/// Encoded size of an [`AnalysisRequest`].
pub const REQUEST_LEN: usize = 27;
/// Encoded size of one [`SecurityPolicy`].
pub const POLICY_LEN: usize = 35;
/// Detached signature size.
pub const SIGNATURE_LEN: usize = 64;
/// Length prefix plus message type.
pub const FRAME_HEADER_LEN: usize = 5;
/// Frames larger than this are rejected before allocation.
pub const MAX_FRAME_LEN: usize = 1 << 24;

const _: () = assert!(REQUEST_LEN < 40);

pub type SignatureBytes = [u8; SIGNATURE_LEN];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("expected {expected} bytes, got {actual}")]
    WrongLength { expected: usize, actual: usize },
    #[error("input truncated")]
    Truncated,
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("unknown message type {0}")]
    UnknownMessageType(u8),
    #[error("frame length {0} out of range")]
    BadFrameLength(usize),
    #[error("invalid {field} code {code}")]
    BadCode { field: &'static str, code: u8 },
    #[error("non-canonical policy encoding")]
    NonCanonical,
    #[error("message type {actual:?} where {expected:?} was expected")]
    UnexpectedType { expected: MessageType, actual: MessageType },
}

/// A gateway's request for a decision on a flow it has no policy for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AnalysisRequest {
    pub box_id: BoxId,
    pub request_id: u32,
    pub metadata: FlowMetadata,
    /// Opaque content tag consumed by DPI stages; carried in the flags byte.
    pub content_tag: u8,
    /// Kept verbatim so decoding stays total and re-encoding is exact.
    pub reserved: [u8; 3],
}

impl AnalysisRequest {
    pub fn new(box_id: BoxId, request_id: u32, metadata: FlowMetadata, content_tag: u8) -> Self {
        AnalysisRequest {
            box_id,
            request_id,
            metadata,
            content_tag,
            reserved: [0; 3],
        }
    }
}

pub fn encode_request(req: &AnalysisRequest) -> [u8; REQUEST_LEN] {
    let mut out = [0u8; REQUEST_LEN];
    let m = &req.metadata;
    out[0..4].copy_from_slice(&req.box_id.0.to_be_bytes());
    out[4..8].copy_from_slice(&req.request_id.to_be_bytes());
    out[8..12].copy_from_slice(&m.src_addr.octets());
    out[12..16].copy_from_slice(&m.dst_addr.octets());
    out[16..18].copy_from_slice(&m.src_port.to_be_bytes());
    out[18..20].copy_from_slice(&m.dst_port.to_be_bytes());
    out[20] = m.protocol;
    out[21..23].copy_from_slice(&m.device_id.0.to_be_bytes());
    out[23] = req.content_tag;
    out[24..27].copy_from_slice(&req.reserved);
    out
}

pub fn decode_request(bytes: &[u8]) -> Result<AnalysisRequest, WireError> {
    if bytes.len() != REQUEST_LEN {
        return Err(WireError::WrongLength {
            expected: REQUEST_LEN,
            actual: bytes.len(),
        });
    }
    let mut r = Reader::new(bytes);
    let box_id = BoxId(r.u32()?);
    let request_id = r.u32()?;
    let metadata = FlowMetadata {
        src_addr: r.addr()?,
        dst_addr: r.addr()?,
        src_port: r.u16()?,
        dst_port: r.u16()?,
        protocol: r.u8()?,
        device_id: DeviceId(r.u16()?),
    };
    let content_tag = r.u8()?;
    let reserved = [r.u8()?, r.u8()?, r.u8()?];
    Ok(AnalysisRequest {
        box_id,
        request_id,
        metadata,
        content_tag,
        reserved,
    })
}

/// Appends the 35-byte canonical form of `policy`:
/// id(8) mask(1) src(4) dst(4) sport(2) dport(2) proto(1) device(2)
/// verdict(1) priority(1) issuer(1) issued_at(8). Wildcard fields are zero.
pub fn encode_policy(policy: &SecurityPolicy, out: &mut Vec<u8>) {
    let p = &policy.pattern;
    out.extend_from_slice(&policy.id.0.to_be_bytes());
    out.push(p.mask());
    out.extend_from_slice(&p.src_addr.unwrap_or(Ipv4Addr::UNSPECIFIED).octets());
    out.extend_from_slice(&p.dst_addr.unwrap_or(Ipv4Addr::UNSPECIFIED).octets());
    out.extend_from_slice(&p.src_port.unwrap_or(0).to_be_bytes());
    out.extend_from_slice(&p.dst_port.unwrap_or(0).to_be_bytes());
    out.push(p.protocol.unwrap_or(0));
    out.extend_from_slice(&p.device_id.map_or(0, |d| d.0).to_be_bytes());
    out.push(policy.verdict.code());
    out.push(policy.priority.code());
    out.push(policy.issuer.code());
    out.extend_from_slice(&policy.issued_at.to_be_bytes());
}

pub fn decode_policy(bytes: &[u8]) -> Result<SecurityPolicy, WireError> {
    let mut r = Reader::new(bytes);
    let policy = r.policy()?;
    r.finish()?;
    Ok(policy)
}

/// Message type byte of a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageType {
    Request = 1,
    Response = 2,
    Update = 3,
    SensorReport = 4,
    RogueReport = 5,
}

impl MessageType {
    pub fn from_code(code: u8) -> Result<Self, WireError> {
        Ok(match code {
            1 => MessageType::Request,
            2 => MessageType::Response,
            3 => MessageType::Update,
            4 => MessageType::SensorReport,
            5 => MessageType::RogueReport,
            other => return Err(WireError::UnknownMessageType(other)),
        })
    }
}

/// Builds a frame, asking `sign` for the signature over the header and
/// payload.
pub fn encode_frame(
    kind: MessageType,
    payload: &[u8],
    sign: impl FnOnce(&[u8]) -> SignatureBytes,
) -> Vec<u8> {
    let body_len = 1 + payload.len() + SIGNATURE_LEN;
    let mut out = Vec::with_capacity(4 + body_len);
    out.extend_from_slice(&(body_len as u32).to_be_bytes());
    out.push(kind as u8);
    out.extend_from_slice(payload);
    let signature = sign(&out);
    out.extend_from_slice(&signature);
    out
}

/// A decoded but not yet verified frame borrowing from the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawFrame<'a> {
    pub kind: MessageType,
    pub payload: &'a [u8],
    /// Bytes covered by the signature.
    pub signed: &'a [u8],
    pub signature: SignatureBytes,
}

impl<'a> RawFrame<'a> {
    pub fn expect(&self, kind: MessageType) -> Result<&'a [u8], WireError> {
        if self.kind == kind {
            Ok(self.payload)
        } else {
            Err(WireError::UnexpectedType {
                expected: kind,
                actual: self.kind,
            })
        }
    }
}

pub fn decode_frame(bytes: &[u8]) -> Result<RawFrame<'_>, WireError> {
    if bytes.len() < 4 {
        return Err(WireError::Truncated);
    }
    let body_len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if !(1 + SIGNATURE_LEN..=MAX_FRAME_LEN).contains(&body_len) {
        return Err(WireError::BadFrameLength(body_len));
    }
    if bytes.len() != 4 + body_len {
        return Err(WireError::WrongLength {
            expected: 4 + body_len,
            actual: bytes.len(),
        });
    }
    let kind = MessageType::from_code(bytes[4])?;
    let sig_at = bytes.len() - SIGNATURE_LEN;
    let mut signature = [0u8; SIGNATURE_LEN];
    signature.copy_from_slice(&bytes[sig_at..]);
    Ok(RawFrame {
        kind,
        payload: &bytes[FRAME_HEADER_LEN..sig_at],
        signed: &bytes[..sig_at],
        signature,
    })
}

/// The cloud's answer to an [`AnalysisRequest`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnalysisResponse {
    pub box_id: BoxId,
    pub request_id: u32,
    pub policy: SecurityPolicy,
}

impl AnalysisResponse {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + POLICY_LEN);
        out.extend_from_slice(&self.box_id.0.to_be_bytes());
        out.extend_from_slice(&self.request_id.to_be_bytes());
        encode_policy(&self.policy, &mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let resp = AnalysisResponse {
            box_id: BoxId(r.u32()?),
            request_id: r.u32()?,
            policy: r.policy()?,
        };
        r.finish()?;
        Ok(resp)
    }
}

/// Dissemination tier of a policy update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum UpdateTier {
    /// High-priority policies, pushed immediately.
    High,
    /// Everything else, held for low-activity windows.
    Bundled,
}

impl UpdateTier {
    pub fn admits(self, priority: Priority) -> bool {
        match self {
            UpdateTier::High => priority == Priority::High,
            UpdateTier::Bundled => priority != Priority::High,
        }
    }
}

/// A sequence-numbered delta batch of policies for one gateway.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyUpdate {
    pub box_id: BoxId,
    pub seq: u64,
    pub tier: UpdateTier,
    pub policies: Vec<SecurityPolicy>,
}

impl PolicyUpdate {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.policies.len() * POLICY_LEN);
        out.extend_from_slice(&self.box_id.0.to_be_bytes());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.push(match self.tier {
            UpdateTier::High => 0,
            UpdateTier::Bundled => 1,
        });
        out.extend_from_slice(&(self.policies.len() as u32).to_be_bytes());
        for p in &self.policies {
            encode_policy(p, &mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let box_id = BoxId(r.u32()?);
        let seq = r.u64()?;
        let tier = match r.u8()? {
            0 => UpdateTier::High,
            1 => UpdateTier::Bundled,
            code => return Err(WireError::BadCode { field: "tier", code }),
        };
        let count = r.u32()? as usize;
        if r.remaining() != count.saturating_mul(POLICY_LEN) {
            return Err(WireError::WrongLength {
                expected: count.saturating_mul(POLICY_LEN),
                actual: r.remaining(),
            });
        }
        let mut policies = Vec::with_capacity(count);
        for _ in 0..count {
            policies.push(r.policy()?);
        }
        r.finish()?;
        Ok(PolicyUpdate {
            box_id,
            seq,
            tier,
            policies,
        })
    }
}

/// Per-device activity aggregated over a report window.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DeviceActivity {
    pub device: DeviceId,
    pub flows: u32,
    pub drops: u32,
    /// Distinct remote addresses, ascending.
    pub remotes: Vec<Ipv4Addr>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SuspiciousSighting {
    pub tick: Tick,
    pub addr: Ipv4Addr,
}

/// Traffic statistics a gateway reports to the cloud.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SensorReport {
    pub box_id: BoxId,
    pub window: TickWindow,
    pub devices: Vec<DeviceActivity>,
    pub suspicious: Vec<SuspiciousSighting>,
}

impl SensorReport {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.box_id.0.to_be_bytes());
        out.extend_from_slice(&self.window.start.to_be_bytes());
        out.extend_from_slice(&self.window.end.to_be_bytes());
        out.extend_from_slice(&(self.devices.len() as u16).to_be_bytes());
        for d in &self.devices {
            out.extend_from_slice(&d.device.0.to_be_bytes());
            out.extend_from_slice(&d.flows.to_be_bytes());
            out.extend_from_slice(&d.drops.to_be_bytes());
            out.extend_from_slice(&(d.remotes.len() as u16).to_be_bytes());
            for a in &d.remotes {
                out.extend_from_slice(&a.octets());
            }
        }
        out.extend_from_slice(&(self.suspicious.len() as u16).to_be_bytes());
        for s in &self.suspicious {
            out.extend_from_slice(&s.tick.to_be_bytes());
            out.extend_from_slice(&s.addr.octets());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let box_id = BoxId(r.u32()?);
        let window = TickWindow::new(r.u64()?, r.u64()?);
        let n = r.u16()?;
        let mut devices = Vec::new();
        for _ in 0..n {
            let device = DeviceId(r.u16()?);
            let flows = r.u32()?;
            let drops = r.u32()?;
            let k = r.u16()?;
            let mut remotes = Vec::with_capacity(usize::from(k));
            for _ in 0..k {
                remotes.push(r.addr()?);
            }
            devices.push(DeviceActivity {
                device,
                flows,
                drops,
                remotes,
            });
        }
        let n = r.u16()?;
        let mut suspicious = Vec::new();
        for _ in 0..n {
            suspicious.push(SuspiciousSighting {
                tick: r.u64()?,
                addr: r.addr()?,
            });
        }
        r.finish()?;
        Ok(SensorReport {
            box_id,
            window,
            devices,
            suspicious,
        })
    }
}

/// A gateway telling the cloud about a source that sent it unverifiable
/// updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RogueReport {
    pub box_id: BoxId,
    pub tick: Tick,
    pub source: Ipv4Addr,
}

impl RogueReport {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16);
        out.extend_from_slice(&self.box_id.0.to_be_bytes());
        out.extend_from_slice(&self.tick.to_be_bytes());
        out.extend_from_slice(&self.source.octets());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let report = RogueReport {
            box_id: BoxId(r.u32()?),
            tick: r.u64()?,
            source: r.addr()?,
        };
        r.finish()?;
        Ok(report)
    }
}

/// Big-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub(crate) fn addr(&mut self) -> Result<Ipv4Addr, WireError> {
        Ok(Ipv4Addr::from(self.array::<4>()?))
    }

    pub(crate) fn policy(&mut self) -> Result<SecurityPolicy, WireError> {
        let id = PolicyId(self.u64()?);
        let mask = self.u8()?;
        if mask & !crate::flow::field::ALL != 0 {
            return Err(WireError::BadCode { field: "mask", code: mask });
        }
        let src_addr = self.addr()?;
        let dst_addr = self.addr()?;
        let src_port = self.u16()?;
        let dst_port = self.u16()?;
        let protocol = self.u8()?;
        let device_id = DeviceId(self.u16()?);
        let flow = FlowMetadata {
            src_addr,
            dst_addr,
            src_port,
            dst_port,
            protocol,
            device_id,
        };
        let pattern = MatchPattern::project(&flow, mask);
        // wildcard slots must be zero, otherwise two encodings share a value
        let wild = !mask & crate::flow::field::ALL;
        if MatchPattern::project(&flow, wild) != MatchPattern::project(&FlowMetadata::ZERO, wild) {
            return Err(WireError::NonCanonical);
        }
        let verdict = self.u8().and_then(|c| {
            Verdict::from_code(c).ok_or(WireError::BadCode { field: "verdict", code: c })
        })?;
        let priority = self.u8().and_then(|c| {
            Priority::from_code(c).ok_or(WireError::BadCode { field: "priority", code: c })
        })?;
        let issuer = self.u8().and_then(|c| {
            Issuer::from_code(c).ok_or(WireError::BadCode { field: "issuer", code: c })
        })?;
        let issued_at = self.u64()?;
        let policy = SecurityPolicy {
            id,
            pattern,
            verdict,
            priority,
            issuer,
            issued_at,
        };
        if !policy.is_consistent() {
            return Err(WireError::NonCanonical);
        }
        Ok(policy)
    }

    pub(crate) fn finish(&self) -> Result<(), WireError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(WireError::TrailingBytes(n)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample_request() -> AnalysisRequest {
        AnalysisRequest::new(
            BoxId(0x0102_0304),
            7,
            FlowMetadata::tcp([10, 0, 1, 2].into(), 51000, [93, 184, 216, 34].into(), 443, DeviceId(9)),
            0,
        )
    }

    #[test]
    fn zeroed_request_is_27_zero_bytes() {
        let req = AnalysisRequest::new(BoxId(0), 0, FlowMetadata::ZERO, 0);
        assert_eq!(encode_request(&req), [0u8; 27]);
    }

    #[test]
    fn request_field_order() {
        let bytes = encode_request(&sample_request());
        assert_eq!(&bytes[0..4], &[1, 2, 3, 4]);
        assert_eq!(&bytes[4..8], &[0, 0, 0, 7]);
        assert_eq!(&bytes[8..12], &[10, 0, 1, 2]);
        assert_eq!(&bytes[18..20], &443u16.to_be_bytes());
        assert_eq!(bytes[20], 6);
        assert_eq!(&bytes[21..23], &[0, 9]);
    }

    #[test]
    fn short_request_is_wrong_length() {
        let bytes = encode_request(&sample_request());
        assert_eq!(
            decode_request(&bytes[..26]),
            Err(WireError::WrongLength { expected: 27, actual: 26 })
        );
    }

    #[test]
    fn policy_wildcards_encode_as_zero() {
        let policy = SecurityPolicy::css(
            PolicyId(5),
            MatchPattern::ANY.with_device(DeviceId(4)),
            Verdict::Drop,
            Priority::Normal,
            12,
        );
        let mut out = Vec::new();
        encode_policy(&policy, &mut out);
        assert_eq!(out.len(), POLICY_LEN);
        assert_eq!(decode_policy(&out), Ok(policy));
        // non-zero value under a wildcard bit
        out[9] = 1;
        assert_eq!(decode_policy(&out), Err(WireError::NonCanonical));
    }

    #[test]
    fn policy_issuer_priority_mismatch_rejected() {
        let policy = SecurityPolicy::manual(PolicyId(1), MatchPattern::ANY, Verdict::Allow, 0);
        let mut out = Vec::new();
        encode_policy(&policy, &mut out);
        out[25] = Priority::High.code();
        assert_eq!(decode_policy(&out), Err(WireError::NonCanonical));
    }

    #[test]
    fn frame_layout() {
        let frame = encode_frame(MessageType::Request, &[7u8; 27], |signed| {
            assert_eq!(signed.len(), 32);
            [0xAB; 64]
        });
        assert_eq!(frame.len(), 4 + 1 + 27 + 64);
        assert_eq!(&frame[..4], &(92u32).to_be_bytes());
        let raw = decode_frame(&frame).unwrap();
        assert_eq!(raw.kind, MessageType::Request);
        assert_eq!(raw.payload, &[7u8; 27]);
        assert_eq!(raw.signature, [0xAB; 64]);
        assert_eq!(raw.signed, &frame[..32]);
    }

    #[test]
    fn frame_rejects_bad_lengths_and_types() {
        let mut frame = encode_frame(MessageType::Update, &[], |_| [0; 64]);
        assert!(decode_frame(&frame[..frame.len() - 1]).is_err());
        frame[4] = 99;
        assert_eq!(decode_frame(&frame), Err(WireError::UnknownMessageType(99)));
        assert!(decode_frame(&[0, 0, 0, 1, 1]).is_err());
        assert_eq!(decode_frame(&[0, 0]), Err(WireError::Truncated));
    }

    #[test]
    fn sensor_report_round_trip() {
        let report = SensorReport {
            box_id: BoxId(3),
            window: TickWindow::new(10, 20),
            devices: vec![DeviceActivity {
                device: DeviceId(1),
                flows: 4,
                drops: 1,
                remotes: vec![[1, 1, 1, 1].into(), [8, 8, 8, 8].into()],
            }],
            suspicious: vec![SuspiciousSighting { tick: 12, addr: [6, 6, 6, 6].into() }],
        };
        assert_eq!(SensorReport::decode(&report.encode()), Ok(report));
    }
}
