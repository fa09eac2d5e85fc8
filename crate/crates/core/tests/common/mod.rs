// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::net::Ipv4Addr;

use edgeguard_core::cloud::{CloudConfig, CloudService, Role, UserProfile};
use edgeguard_core::flow::{proto, DeviceId, Subnet};
use edgeguard_core::gateway::{Gateway, GatewayConfig};
use edgeguard_core::middlebox::{
    DpiConfig, FirewallConfig, FirewallRule, IdsConfig, IdsSignature, MiddleboxConfig, MiddleboxManager, PoolId,
};
use edgeguard_core::trust::{Certificate, CertificateAuthority, Keypair, SubjectId};
use edgeguard_core::wire::{self, AnalysisRequest, MessageType};
use edgeguard_core::{BoxId, FlowMetadata, MatchPattern, Verdict};

pub struct Fixture {
    pub ca: CertificateAuthority,
    pub css_keys: Keypair,
    pub css_cert: Certificate,
    pub middleboxes: MiddleboxManager,
    pub config: CloudConfig,
    pub css: CloudService,
    pub boxes: Vec<(Keypair, Certificate)>,
}

pub fn subnet(b: usize) -> Subnet {
    Subnet::new(Ipv4Addr::new(10, 0, b as u8 + 1, 0), 24)
}

pub fn box_id(b: usize) -> BoxId {
    BoxId(b as u32 + 1)
}

/// Firewall dropping telnet, IDS flagging port 2323, DPI banning tag 9.
pub fn standard_middleboxes() -> MiddleboxManager {
    let mut mgr = MiddleboxManager::new();
    mgr.deploy(
        PoolId(1),
        MiddleboxConfig::Firewall(FirewallConfig {
            allowlist: BTreeSet::new(),
            rules: vec![FirewallRule {
                pattern: MatchPattern::ANY.with_protocol(proto::TCP).with_dst_port(23),
                verdict: Verdict::Drop,
            }],
        }),
    );
    mgr.deploy(
        PoolId(2),
        MiddleboxConfig::Ids(IdsConfig {
            signatures: vec![IdsSignature { pattern: MatchPattern::ANY.with_dst_port(2323), rate: None }],
        }),
    );
    mgr.deploy(PoolId(3), MiddleboxConfig::Dpi(DpiConfig { banned: [9].into_iter().collect() }));
    mgr
}

impl Fixture {
    pub fn new(boxes: usize, config: CloudConfig) -> Self {
        Self::with_profiles(config, (0..boxes).map(|b| UserProfile::single_class(box_id(b), subnet(b), vec![PoolId(1), PoolId(2), PoolId(3)])).collect())
    }

    pub fn with_profiles(config: CloudConfig, profiles: Vec<UserProfile>) -> Self {
        let mut ca = CertificateAuthority::from_u64(42);
        let (css_keys, css_cert) = ca.register(SubjectId(0), 0).unwrap();
        let middleboxes = standard_middleboxes();
        let mut css = CloudService::new(config.clone(), Role::Primary, css_keys.clone(), ca.anchor(), middleboxes.clone());
        let mut boxes = Vec::new();
        for profile in profiles {
            let (keys, cert) = ca.register(SubjectId(profile.box_id.0), 0).unwrap();
            css.register_box(profile, cert).unwrap();
            boxes.push((keys, cert));
        }
        Fixture { ca, css_keys, css_cert, middleboxes, config, css, boxes }
    }

    /// A backup built the same way as the primary, before any journaled
    /// mutation.
    pub fn backup(&self, profiles: &[UserProfile]) -> CloudService {
        let mut backup = CloudService::new(
            self.config.clone(),
            Role::Backup,
            self.css_keys.clone(),
            self.ca.anchor(),
            self.middleboxes.clone(),
        );
        for (profile, (_, cert)) in profiles.iter().zip(&self.boxes) {
            backup.register_box(profile.clone(), *cert).unwrap();
        }
        backup
    }

    pub fn gateway(&self, b: usize) -> Gateway {
        let (keys, _) = &self.boxes[b];
        Gateway::new(GatewayConfig::new(box_id(b), subnet(b)), keys.clone(), self.ca.anchor(), self.css_cert)
    }

    pub fn request_frame(&self, b: usize, req: &AnalysisRequest) -> Vec<u8> {
        let keys = &self.boxes[b].0;
        wire::encode_frame(MessageType::Request, &wire::encode_request(req), |m| keys.sign(m))
    }
}

pub fn inbound(b: usize, src: Ipv4Addr, host: u8, port: u16) -> FlowMetadata {
    FlowMetadata::tcp(src, 40000, subnet(b).host(u32::from(host)), port, DeviceId(1))
}

pub fn outbound(b: usize, host: u8, dst: Ipv4Addr, port: u16) -> FlowMetadata {
    FlowMetadata::tcp(subnet(b).host(u32::from(host)), 40000, dst, port, DeviceId(1))
}
