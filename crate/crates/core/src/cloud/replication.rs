// SPDX-License-Identifier: Apache-2.0

//! Primary/backup replication by command log.
//!
//! Every mutating call on the primary is journaled as a [`Command`] before
//! it runs. The backup was bootstrapped from the same configuration and
//! re-executes the commands in order, so both end in the same state.
//!
//! Record layout (big-endian): `seq u64 | kind u8 | len u32 | payload |
//! crc32 u32`, where the checksum covers everything before it.

use alloc::vec::Vec;
use core::net::Ipv4Addr;

use thiserror::Error;

use super::Audience;
use crate::flow::{BoxId, MatchPattern, Verdict};
use crate::middlebox::InstanceId;
use crate::policy::Priority;
use crate::wire::{self, AnalysisRequest, Reader, SensorReport, UpdateTier, WireError};
use crate::Tick;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplicationError {
    #[error("replication gap: expected record {expected}, got {got}")]
    Gap { expected: u64, got: u64 },
    #[error("record checksum mismatch")]
    Checksum,
    #[error("malformed record: {0}")]
    Malformed(#[from] WireError),
    #[error("unknown command kind {0}")]
    UnknownKind(u8),
    #[error("operation needs role {0:?}")]
    WrongRole(super::Role),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplicationRecord {
    pub seq: u64,
    pub kind: u8,
    pub payload: Vec<u8>,
    pub checksum: u32,
}

fn checksum(seq: u64, kind: u8, payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&seq.to_be_bytes());
    h.update(&[kind]);
    h.update(&(payload.len() as u32).to_be_bytes());
    h.update(payload);
    h.finalize()
}

impl ReplicationRecord {
    pub fn new(seq: u64, command: &Command) -> Self {
        let (kind, payload) = command.encode();
        ReplicationRecord {
            seq,
            kind,
            checksum: checksum(seq, kind, &payload),
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.payload.len());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.push(self.kind);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&self.checksum.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ReplicationError> {
        let mut r = Reader::new(bytes);
        let seq = r.u64()?;
        let kind = r.u8()?;
        let len = r.u32()? as usize;
        let payload = r.take(len)?.to_vec();
        let stored = r.u32()?;
        r.finish()?;
        let record = ReplicationRecord { seq, kind, payload, checksum: stored };
        record.verify()?;
        Ok(record)
    }

    pub fn verify(&self) -> Result<(), ReplicationError> {
        if checksum(self.seq, self.kind, &self.payload) == self.checksum {
            Ok(())
        } else {
            Err(ReplicationError::Checksum)
        }
    }

    pub fn command(&self) -> Result<Command, ReplicationError> {
        self.verify()?;
        Command::decode(self.kind, &self.payload)
    }
}

/// A state-mutating call on the cloud service.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Command {
    Frame { from: BoxId, now: Tick, frame: Vec<u8> },
    Request { now: Tick, request: AnalysisRequest },
    Observe { now: Tick, request: AnalysisRequest },
    DetectScans { now: Tick },
    GenerateUpdate { now: Tick, box_id: BoxId, tier: UpdateTier },
    Disseminate { now: Tick },
    Tick { now: Tick },
    Reports { now: Tick, reports: Vec<SensorReport> },
    Revoke { now: Tick, box_id: BoxId },
    FailMiddlebox { instance: InstanceId },
    Publish {
        now: Tick,
        pattern: MatchPattern,
        verdict: Verdict,
        priority: Priority,
        audience: Audience,
    },
}

fn put_audience(out: &mut Vec<u8>, audience: Audience) {
    match audience {
        Audience::All => out.push(0),
        Audience::Only(b) => {
            out.push(1);
            out.extend_from_slice(&b.0.to_be_bytes());
        }
    }
}

fn get_audience(r: &mut Reader<'_>) -> Result<Audience, WireError> {
    match r.u8()? {
        0 => Ok(Audience::All),
        1 => Ok(Audience::Only(BoxId(r.u32()?))),
        code => Err(WireError::BadCode { field: "audience", code }),
    }
}

fn tier_code(tier: UpdateTier) -> u8 {
    match tier {
        UpdateTier::High => 0,
        UpdateTier::Bundled => 1,
    }
}

impl Command {
    pub fn encode(&self) -> (u8, Vec<u8>) {
        let mut out = Vec::new();
        let kind = match self {
            Command::Frame { from, now, frame } => {
                out.extend_from_slice(&from.0.to_be_bytes());
                out.extend_from_slice(&now.to_be_bytes());
                out.extend_from_slice(frame);
                1
            }
            Command::Request { now, request } | Command::Observe { now, request } => {
                out.extend_from_slice(&now.to_be_bytes());
                out.extend_from_slice(&wire::encode_request(request));
                if matches!(self, Command::Request { .. }) {
                    2
                } else {
                    3
                }
            }
            Command::DetectScans { now } => {
                out.extend_from_slice(&now.to_be_bytes());
                4
            }
            Command::GenerateUpdate { now, box_id, tier } => {
                out.extend_from_slice(&now.to_be_bytes());
                out.extend_from_slice(&box_id.0.to_be_bytes());
                out.push(tier_code(*tier));
                5
            }
            Command::Disseminate { now } => {
                out.extend_from_slice(&now.to_be_bytes());
                6
            }
            Command::Tick { now } => {
                out.extend_from_slice(&now.to_be_bytes());
                7
            }
            Command::Reports { now, reports } => {
                out.extend_from_slice(&now.to_be_bytes());
                out.extend_from_slice(&(reports.len() as u32).to_be_bytes());
                for report in reports {
                    let bytes = report.encode();
                    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
                    out.extend_from_slice(&bytes);
                }
                8
            }
            Command::Revoke { now, box_id } => {
                out.extend_from_slice(&now.to_be_bytes());
                out.extend_from_slice(&box_id.0.to_be_bytes());
                9
            }
            Command::FailMiddlebox { instance } => {
                out.extend_from_slice(&instance.0.to_be_bytes());
                10
            }
            Command::Publish { now, pattern, verdict, priority, audience } => {
                out.extend_from_slice(&now.to_be_bytes());
                put_pattern(&mut out, pattern);
                out.push(verdict.code());
                out.push(priority.code());
                put_audience(&mut out, *audience);
                11
            }
        };
        (kind, out)
    }

    pub fn decode(kind: u8, payload: &[u8]) -> Result<Self, ReplicationError> {
        let mut r = Reader::new(payload);
        let cmd = match kind {
            1 => {
                let from = BoxId(r.u32()?);
                let now = r.u64()?;
                let frame = r.take(r.remaining())?.to_vec();
                Command::Frame { from, now, frame }
            }
            2 | 3 => {
                let now = r.u64()?;
                let request = wire::decode_request(r.take(wire::REQUEST_LEN)?)?;
                if kind == 2 {
                    Command::Request { now, request }
                } else {
                    Command::Observe { now, request }
                }
            }
            4 => Command::DetectScans { now: r.u64()? },
            5 => {
                let now = r.u64()?;
                let box_id = BoxId(r.u32()?);
                let tier = match r.u8()? {
                    0 => UpdateTier::High,
                    1 => UpdateTier::Bundled,
                    code => return Err(WireError::BadCode { field: "tier", code }.into()),
                };
                Command::GenerateUpdate { now, box_id, tier }
            }
            6 => Command::Disseminate { now: r.u64()? },
            7 => Command::Tick { now: r.u64()? },
            8 => {
                let now = r.u64()?;
                let n = r.u32()?;
                let mut reports = Vec::new();
                for _ in 0..n {
                    let len = r.u32()? as usize;
                    reports.push(SensorReport::decode(r.take(len)?)?);
                }
                Command::Reports { now, reports }
            }
            9 => {
                let now = r.u64()?;
                Command::Revoke { now, box_id: BoxId(r.u32()?) }
            }
            10 => Command::FailMiddlebox { instance: InstanceId(r.u32()?) },
            11 => {
                let now = r.u64()?;
                let pattern = get_pattern(&mut r)?;
                let code = r.u8()?;
                let verdict =
                    Verdict::from_code(code).ok_or(WireError::BadCode { field: "verdict", code })?;
                let code = r.u8()?;
                let priority = Priority::from_code(code)
                    .ok_or(WireError::BadCode { field: "priority", code })?;
                let audience = get_audience(&mut r)?;
                Command::Publish { now, pattern, verdict, priority, audience }
            }
            other => return Err(ReplicationError::UnknownKind(other)),
        };
        r.finish()?;
        Ok(cmd)
    }
}

fn put_pattern(out: &mut Vec<u8>, p: &MatchPattern) {
    out.push(p.mask());
    let addr = |a: Option<Ipv4Addr>| a.unwrap_or(Ipv4Addr::UNSPECIFIED).octets();
    out.extend_from_slice(&addr(p.src_addr));
    out.extend_from_slice(&addr(p.dst_addr));
    out.extend_from_slice(&p.src_port.unwrap_or(0).to_be_bytes());
    out.extend_from_slice(&p.dst_port.unwrap_or(0).to_be_bytes());
    out.push(p.protocol.unwrap_or(0));
    out.extend_from_slice(&p.device_id.map_or(0, |d| d.0).to_be_bytes());
}

fn get_pattern(r: &mut Reader<'_>) -> Result<MatchPattern, WireError> {
    use crate::flow::{field, DeviceId, FlowMetadata};
    let mask = r.u8()?;
    let flow = FlowMetadata {
        src_addr: r.addr()?,
        dst_addr: r.addr()?,
        src_port: r.u16()?,
        dst_port: r.u16()?,
        protocol: r.u8()?,
        device_id: DeviceId(r.u16()?),
    };
    Ok(MatchPattern::project(&flow, mask & field::ALL))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{DeviceId, FlowMetadata};

    fn samples() -> Vec<Command> {
        let flow = FlowMetadata::tcp([1, 2, 3, 4].into(), 5, [6, 7, 8, 9].into(), 10, DeviceId(3));
        let request = AnalysisRequest::new(BoxId(2), 9, flow, 4);
        alloc::vec![
            Command::Frame { from: BoxId(1), now: 3, frame: alloc::vec![1, 2, 3] },
            Command::Request { now: 4, request },
            Command::Observe { now: 4, request },
            Command::DetectScans { now: 5 },
            Command::GenerateUpdate { now: 6, box_id: BoxId(3), tier: UpdateTier::Bundled },
            Command::Disseminate { now: 7 },
            Command::Tick { now: 8 },
            Command::Reports { now: 9, reports: Vec::new() },
            Command::Revoke { now: 10, box_id: BoxId(4) },
            Command::FailMiddlebox { instance: InstanceId(5) },
            Command::Publish {
                now: 11,
                pattern: MatchPattern::ANY.with_dst_port(23).with_device(DeviceId(2)),
                verdict: Verdict::Drop,
                priority: Priority::High,
                audience: Audience::Only(BoxId(1)),
            },
        ]
    }

    #[test]
    fn records_round_trip() {
        for (i, cmd) in samples().into_iter().enumerate() {
            let rec = ReplicationRecord::new(i as u64 + 1, &cmd);
            let back = ReplicationRecord::decode(&rec.encode()).unwrap();
            assert_eq!(back, rec);
            assert_eq!(back.command().unwrap(), cmd);
        }
    }

    #[test]
    fn corrupted_record_rejected() {
        let rec = ReplicationRecord::new(1, &Command::Tick { now: 3 });
        let bytes = rec.encode();
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x40;
            assert!(ReplicationRecord::decode(&b).is_err(), "flip at {i}");
        }
    }
}
