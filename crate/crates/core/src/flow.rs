// SPDX-License-Identifier: Apache-2.0

//! Flow identity and wildcard match patterns.

use core::fmt;
use core::net::Ipv4Addr;

/// IANA protocol numbers used throughout the crate.
pub mod proto {
    pub const ICMP: u8 = 1;
    pub const TCP: u8 = 6;
    pub const UDP: u8 = 17;
}

/// Identifier of a gateway registered with the cloud service.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BoxId(pub u32);

/// Gateway-local device identifier, stable for the gateway's lifetime.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeviceId(pub u16);

impl fmt::Display for BoxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "box-{}", self.0)
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dev-{}", self.0)
    }
}

/// The six fields a gateway extracts from a new connection attempt.
///
/// Ports are zero for protocols without a port concept (ICMP).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowMetadata {
    pub src_addr: Ipv4Addr,
    pub dst_addr: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
    pub device_id: DeviceId,
}

impl FlowMetadata {
    pub const ZERO: FlowMetadata = FlowMetadata {
        src_addr: Ipv4Addr::UNSPECIFIED,
        dst_addr: Ipv4Addr::UNSPECIFIED,
        src_port: 0,
        dst_port: 0,
        protocol: 0,
        device_id: DeviceId(0),
    };

    pub fn tcp(
        src_addr: Ipv4Addr,
        src_port: u16,
        dst_addr: Ipv4Addr,
        dst_port: u16,
        device_id: DeviceId,
    ) -> Self {
        FlowMetadata {
            src_addr,
            dst_addr,
            src_port,
            dst_port,
            protocol: proto::TCP,
            device_id,
        }
    }
}

impl fmt::Display for FlowMetadata {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{} -> {}:{} proto {} ({})",
            self.src_addr, self.src_port, self.dst_addr, self.dst_port, self.protocol, self.device_id
        )
    }
}

/// Decision applied to a flow. There is no third "defer" value: every flow
/// leaving a gateway is either allowed or dropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Verdict {
    Allow,
    Drop,
}

impl Verdict {
    pub fn code(self) -> u8 {
        match self {
            Verdict::Allow => 0,
            Verdict::Drop => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Verdict::Allow),
            1 => Some(Verdict::Drop),
            _ => None,
        }
    }

    pub fn is_drop(self) -> bool {
        self == Verdict::Drop
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Allow => "allow",
            Verdict::Drop => "drop",
        })
    }
}

/// Bit positions of the six fields inside a pattern mask.
pub mod field {
    pub const SRC_ADDR: u8 = 1 << 0;
    pub const DST_ADDR: u8 = 1 << 1;
    pub const SRC_PORT: u8 = 1 << 2;
    pub const DST_PORT: u8 = 1 << 3;
    pub const PROTOCOL: u8 = 1 << 4;
    pub const DEVICE_ID: u8 = 1 << 5;
    pub const ALL: u8 = 0b11_1111;
}

/// One optional constraint per [`FlowMetadata`] field; `None` is a wildcard.
///
/// Complement constraints ("any destination except ...") are not
/// expressible. Exceptions are written as a more specific policy that
/// outranks a general one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MatchPattern {
    pub src_addr: Option<Ipv4Addr>,
    pub dst_addr: Option<Ipv4Addr>,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub protocol: Option<u8>,
    pub device_id: Option<DeviceId>,
}

impl MatchPattern {
    /// The all-wildcard pattern, matching every flow.
    pub const ANY: MatchPattern = MatchPattern {
        src_addr: None,
        dst_addr: None,
        src_port: None,
        dst_port: None,
        protocol: None,
        device_id: None,
    };

    /// Pattern matching exactly one 6-tuple.
    pub fn exact(flow: &FlowMetadata) -> Self {
        Self::project(flow, field::ALL)
    }

    /// Keeps the fields of `flow` selected by `mask` and wildcards the rest.
    pub fn project(flow: &FlowMetadata, mask: u8) -> Self {
        let pick = |bit: u8| mask & bit != 0;
        MatchPattern {
            src_addr: pick(field::SRC_ADDR).then_some(flow.src_addr),
            dst_addr: pick(field::DST_ADDR).then_some(flow.dst_addr),
            src_port: pick(field::SRC_PORT).then_some(flow.src_port),
            dst_port: pick(field::DST_PORT).then_some(flow.dst_port),
            protocol: pick(field::PROTOCOL).then_some(flow.protocol),
            device_id: pick(field::DEVICE_ID).then_some(flow.device_id),
        }
    }

    pub fn with_src_addr(mut self, addr: Ipv4Addr) -> Self {
        self.src_addr = Some(addr);
        self
    }

    pub fn with_dst_addr(mut self, addr: Ipv4Addr) -> Self {
        self.dst_addr = Some(addr);
        self
    }

    pub fn with_src_port(mut self, port: u16) -> Self {
        self.src_port = Some(port);
        self
    }

    pub fn with_dst_port(mut self, port: u16) -> Self {
        self.dst_port = Some(port);
        self
    }

    pub fn with_protocol(mut self, protocol: u8) -> Self {
        self.protocol = Some(protocol);
        self
    }

    pub fn with_device(mut self, device: DeviceId) -> Self {
        self.device_id = Some(device);
        self
    }

    /// Bit set of the concrete (non-wildcard) fields, see [`field`].
    pub fn mask(&self) -> u8 {
        let mut mask = 0;
        if self.src_addr.is_some() {
            mask |= field::SRC_ADDR;
        }
        if self.dst_addr.is_some() {
            mask |= field::DST_ADDR;
        }
        if self.src_port.is_some() {
            mask |= field::SRC_PORT;
        }
        if self.dst_port.is_some() {
            mask |= field::DST_PORT;
        }
        if self.protocol.is_some() {
            mask |= field::PROTOCOL;
        }
        if self.device_id.is_some() {
            mask |= field::DEVICE_ID;
        }
        mask
    }

    /// Number of concrete constraints, 0 through 6.
    pub fn specificity(&self) -> u8 {
        self.mask().count_ones() as u8
    }

    pub fn matches(&self, flow: &FlowMetadata) -> bool {
        fn ok<T: PartialEq>(constraint: Option<T>, value: T) -> bool {
            constraint.is_none_or(|c| c == value)
        }
        ok(self.src_addr, flow.src_addr)
            && ok(self.dst_addr, flow.dst_addr)
            && ok(self.src_port, flow.src_port)
            && ok(self.dst_port, flow.dst_port)
            && ok(self.protocol, flow.protocol)
            && ok(self.device_id, flow.device_id)
    }
}

impl MatchPattern {
    /// True when some flow matches both patterns.
    pub fn overlaps(&self, other: &MatchPattern) -> bool {
        fn ok<T: PartialEq>(a: Option<T>, b: Option<T>) -> bool {
            match (a, b) {
                (Some(x), Some(y)) => x == y,
                _ => true,
            }
        }
        ok(self.src_addr, other.src_addr)
            && ok(self.dst_addr, other.dst_addr)
            && ok(self.src_port, other.src_port)
            && ok(self.dst_port, other.dst_port)
            && ok(self.protocol, other.protocol)
            && ok(self.device_id, other.device_id)
    }
}

/// Free-function form of [`MatchPattern::matches`].
pub fn matches(pattern: &MatchPattern, flow: &FlowMetadata) -> bool {
    pattern.matches(flow)
}

/// IPv4 prefix, used to tell local hosts from remote ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Subnet {
    pub network: Ipv4Addr,
    pub prefix_len: u8,
}

impl Subnet {
    pub fn new(network: Ipv4Addr, prefix_len: u8) -> Self {
        let prefix_len = prefix_len.min(32);
        let network = Ipv4Addr::from(u32::from(network) & Self::mask_bits(prefix_len));
        Subnet { network, prefix_len }
    }

    fn mask_bits(prefix_len: u8) -> u32 {
        if prefix_len == 0 {
            0
        } else {
            u32::MAX << (32 - u32::from(prefix_len))
        }
    }

    pub fn contains(&self, addr: Ipv4Addr) -> bool {
        u32::from(addr) & Self::mask_bits(self.prefix_len) == u32::from(self.network)
    }

    /// The `index`-th address in the subnet (`index` 0 is the network address).
    pub fn host(&self, index: u32) -> Ipv4Addr {
        Ipv4Addr::from(u32::from(self.network).wrapping_add(index))
    }
}

impl fmt::Display for Subnet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.network, self.prefix_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(src: [u8; 4], dst: [u8; 4]) -> FlowMetadata {
        FlowMetadata::tcp(src.into(), 40000, dst.into(), 443, DeviceId(3))
    }

    #[test]
    fn all_wildcard_matches_anything() {
        assert!(MatchPattern::ANY.matches(&flow([1, 2, 3, 4], [5, 6, 7, 8])));
        assert!(MatchPattern::ANY.matches(&FlowMetadata::ZERO));
        assert_eq!(MatchPattern::ANY.specificity(), 0);
    }

    #[test]
    fn single_field_discrimination() {
        let p = MatchPattern::ANY.with_src_addr([10, 0, 0, 5].into());
        assert!(p.matches(&flow([10, 0, 0, 5], [8, 8, 8, 8])));
        assert!(!p.matches(&flow([10, 0, 0, 6], [8, 8, 8, 8])));
    }

    #[test]
    fn specificity_for_every_mask() {
        let f = flow([10, 0, 0, 1], [1, 1, 1, 1]);
        for mask in 0..=field::ALL {
            let p = MatchPattern::project(&f, mask);
            assert_eq!(p.mask(), mask);
            assert_eq!(p.specificity() as u32, 6 - (!mask & field::ALL).count_ones());
            assert!(p.matches(&f));
        }
    }

    #[test]
    fn subnet_membership() {
        let net = Subnet::new([10, 0, 1, 77].into(), 24);
        assert_eq!(net.network, Ipv4Addr::new(10, 0, 1, 0));
        assert!(net.contains([10, 0, 1, 200].into()));
        assert!(!net.contains([10, 0, 2, 1].into()));
        assert!(Subnet::new([0, 0, 0, 0].into(), 0).contains([9, 9, 9, 9].into()));
        assert_eq!(net.host(3), Ipv4Addr::new(10, 0, 1, 3));
    }
}
