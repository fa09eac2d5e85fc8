// SPDX-License-Identifier: Apache-2.0

//! Seeded traffic generation. All arrivals are drawn up front, so the
//! offered load does not depend on how the network reacts to it.

use std::net::Ipv4Addr;

use edgeguard_core::{FlowMetadata, Tick};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scenario::{Label, Scenario};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    /// Outbound flow from a local host to a catalog server.
    HostOutbound,
    /// Inbound flow from a benign remote node.
    External { node: u32 },
    /// Port-scan probe from a zombie.
    Zombie { zombie: u32 },
    /// `[[flow]]` entry of the scenario, by index.
    Scripted { index: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arrival {
    pub tick: Tick,
    pub segment: usize,
    pub flow: FlowMetadata,
    pub tag: u8,
    pub label: Label,
    pub origin: Origin,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn offset(base: Ipv4Addr, i: u32) -> Ipv4Addr {
    Ipv4Addr::from(u32::from(base).wrapping_add(i + 1))
}

pub fn zombie_addr(sc: &Scenario, zombie: u32) -> Option<Ipv4Addr> {
    sc.spec.attack.as_ref().map(|a| offset(a.network, zombie))
}

pub fn external_addr(sc: &Scenario, node: u32) -> Ipv4Addr {
    offset(sc.spec.benign.external_network, node)
}

/// Every arrival of the run, ordered by tick; within a tick benign flows
/// come first, then probes, then scripted flows.
pub fn generate(sc: &Scenario) -> Vec<Arrival> {
    let mut out = Vec::new();
    benign(sc, &mut out);
    attack(sc, &mut out);
    for (index, f) in sc.spec.flows.iter().enumerate() {
        let protocol = f.protocol.resolve().expect("validated");
        out.push(Arrival {
            tick: f.tick,
            segment: sc.segment_index(&f.segment).expect("validated"),
            flow: FlowMetadata {
                src_addr: f.src,
                dst_addr: f.dst,
                src_port: f.src_port,
                dst_port: f.dst_port,
                protocol,
                device_id: edgeguard_core::DeviceId(f.device),
            },
            tag: f.tag,
            label: f.label,
            origin: Origin::Scripted { index },
        });
    }
    out.sort_by_key(|a| a.tick);
    out
}

fn benign(sc: &Scenario, out: &mut Vec<Arrival>) {
    let spec = &sc.spec;
    let b = &spec.benign;
    let mut r = rng(spec.seed, 1);
    let all_servers: Vec<u32> = (0..spec.catalog.servers).collect();
    for tick in 0..spec.ticks {
        let m = b.multiplier(tick);
        for (s, seg) in sc.segments.iter().enumerate() {
            for (h, &(addr, device)) in seg.hosts.iter().enumerate() {
                if b.host_rate == 0.0 || !r.gen_bool((b.host_rate * m).min(1.0)) {
                    continue;
                }
                let servers = spec.segments[s].hosts[h].servers.as_deref().unwrap_or(&all_servers);
                let (dst, port) = spec.catalog.server(servers[r.gen_range(0..servers.len())]);
                let sport = r.gen_range(32768..61000);
                out.push(Arrival {
                    tick,
                    segment: s,
                    flow: FlowMetadata::tcp(addr, sport, dst, port, device),
                    tag: 0,
                    label: Label::Benign,
                    origin: Origin::HostOutbound,
                });
            }
        }
        for node in 0..b.external_nodes {
            if b.external_rate == 0.0 || !r.gen_bool((b.external_rate * m).min(1.0)) {
                continue;
            }
            let s = r.gen_range(0..sc.segments.len());
            let hosts = &sc.segments[s].hosts;
            let (dst, device) = hosts[r.gen_range(0..hosts.len())];
            let port = b.external_ports[node as usize % b.external_ports.len()];
            let sport = r.gen_range(32768..61000);
            out.push(Arrival {
                tick,
                segment: s,
                flow: FlowMetadata::tcp(external_addr(sc, node), sport, dst, port, device),
                tag: 0,
                label: Label::Benign,
                origin: Origin::External { node },
            });
        }
    }
}

fn attack(sc: &Scenario, out: &mut Vec<Arrival>) {
    let spec = &sc.spec;
    let Some(a) = &spec.attack else { return };
    let mut r = rng(spec.seed, 2);
    let joins: Vec<u64> = (0..a.zombies)
        .map(|_| if a.join_spread == 0 { 0 } else { r.gen_range(0..=a.join_spread) })
        .collect();
    for (s, &start) in a.schedule.iter().enumerate() {
        let hosts = &sc.segments[s].hosts;
        for zombie in 0..a.zombies {
            let src = offset(a.network, zombie);
            let begin = start + joins[zombie as usize];
            let ports = sample(&mut r, 65535, a.ports_per_zombie as usize);
            for (k, port) in ports.into_iter().enumerate() {
                let tick = begin + k as u64 / u64::from(a.probe_rate);
                let (dst, device) = hosts[r.gen_range(0..hosts.len())];
                let sport = r.gen_range(1024..65535);
                if tick >= spec.ticks {
                    continue;
                }
                out.push(Arrival {
                    tick,
                    segment: s,
                    flow: FlowMetadata::tcp(src, sport, dst, port as u16 + 1, device),
                    tag: 0,
                    label: Label::Attack,
                    origin: Origin::Zombie { zombie },
                });
            }
        }
    }
}
