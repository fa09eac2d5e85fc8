// SPDX-License-Identifier: Apache-2.0

//! Per-flow verdicts of tiny random scenarios, checked against a
//! brute-force evaluator that re-implements policy lookup and chain
//! evaluation without any messaging, signing or indexing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::net::Ipv4Addr;

use edgeguard::{run_scenario, Scenario};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HOST: Ipv4Addr = Ipv4Addr::new(10, 9, 0, 2);
const REMOTES: [Ipv4Addr; 3] =
    [Ipv4Addr::new(198, 51, 100, 1), Ipv4Addr::new(198, 51, 100, 2), Ipv4Addr::new(192, 0, 2, 5)];
const PORTS: [u16; 4] = [22, 23, 80, 443];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Pat {
    src: Option<Ipv4Addr>,
    dst: Option<Ipv4Addr>,
    sport: Option<u16>,
    dport: Option<u16>,
    dev: Option<u16>,
}

#[derive(Clone, Copy, Debug)]
struct Flow {
    tick: u64,
    src: Ipv4Addr,
    dst: Ipv4Addr,
    sport: u16,
    dport: u16,
    dev: u16,
    tag: u8,
}

impl Pat {
    fn hits(&self, f: &Flow) -> bool {
        self.src.is_none_or(|v| v == f.src)
            && self.dst.is_none_or(|v| v == f.dst)
            && self.sport.is_none_or(|v| v == f.sport)
            && self.dport.is_none_or(|v| v == f.dport)
            && self.dev.is_none_or(|v| v == f.dev)
    }

    fn overlaps(&self, o: &Pat) -> bool {
        fn ok<T: PartialEq>(a: Option<T>, b: Option<T>) -> bool {
            a.zip(b).is_none_or(|(x, y)| x == y)
        }
        ok(self.src, o.src) && ok(self.dst, o.dst) && ok(self.sport, o.sport) && ok(self.dport, o.dport) && ok(self.dev, o.dev)
    }

    fn fields(&self) -> u8 {
        // protocol is always concrete in minted patterns and never elsewhere
        [self.src.is_some(), self.dst.is_some(), self.sport.is_some(), self.dport.is_some(), self.dev.is_some()]
            .iter()
            .filter(|b| **b)
            .count() as u8
    }

    fn toml(&self) -> String {
        let mut parts = Vec::new();
        if let Some(v) = self.src {
            parts.push(format!("src = \"{v}\""));
        }
        if let Some(v) = self.dst {
            parts.push(format!("dst = \"{v}\""));
        }
        if let Some(v) = self.dport {
            parts.push(format!("dst_port = {v}"));
        }
        if let Some(v) = self.dev {
            parts.push(format!("device = {v}"));
        }
        format!("{{ {} }}", parts.join(", "))
    }
}

#[derive(Clone, Copy, Debug)]
struct Pol {
    pat: Pat,
    /// Minted policies also pin the protocol.
    proto_pinned: bool,
    drop: bool,
    prio: u8,
    issued: u64,
    id: u64,
}

impl Pol {
    fn key(&self) -> (u8, u8, u64, u64) {
        (self.prio, self.pat.fields() + u8::from(self.proto_pinned), self.issued, self.id)
    }
}

fn best<'a>(pols: &'a [Pol], f: &Flow) -> Option<&'a Pol> {
    pols.iter().filter(|p| p.pat.hits(f)).max_by_key(|p| p.key())
}

#[derive(Clone, Debug)]
enum Stage {
    Firewall { allow: BTreeSet<Ipv4Addr>, rules: Vec<(Pat, bool)> },
    Ids { port: u16, rate: Option<(u32, u64)> },
    Dpi,
}

struct Case {
    delay: u64,
    full_session: bool,
    stages: Vec<Stage>,
    manual: Vec<(Pat, bool)>,
    base: Vec<(Pat, bool, bool)>,
    flows: Vec<Flow>,
}

fn random_pat(rng: &mut ChaCha8Rng, dev: u16) -> Pat {
    let mut p = Pat::default();
    while p == Pat::default() {
        if rng.gen_bool(0.3) {
            p.dst = Some(*REMOTES.choose(rng).unwrap());
        }
        if rng.gen_bool(0.2) {
            p.src = Some(*REMOTES.choose(rng).unwrap());
        }
        if rng.gen_bool(0.4) {
            p.dport = Some(*PORTS.choose(rng).unwrap());
        }
        if rng.gen_bool(0.2) {
            p.dev = Some(dev);
        }
    }
    p
}

fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delay = rng.gen_range(1..=2);
    let dev = *[1u16, 7].choose(&mut rng).unwrap();

    let mut all = vec![
        Stage::Firewall {
            allow: REMOTES.iter().copied().filter(|_| rng.gen_bool(0.3)).collect(),
            rules: (0..rng.gen_range(0..=2))
                .map(|_| {
                    let pat = if rng.gen_bool(0.3) { Pat { dev: Some(dev), ..Pat::default() } } else { random_pat(&mut rng, dev) };
                    (pat, rng.gen_bool(0.7))
                })
                .collect(),
        },
        Stage::Ids {
            port: *PORTS.choose(&mut rng).unwrap(),
            rate: rng.gen_bool(0.5).then(|| (rng.gen_range(0..=2), rng.gen_range(5..20))),
        },
        Stage::Dpi,
    ];
    all.shuffle(&mut rng);
    all.truncate(rng.gen_range(1..=3));

    let n_manual = rng.gen_range(0..=2);
    let n_base = rng.gen_range(0..=(4 - n_manual).min(2));
    let manual = (0..n_manual).map(|_| (random_pat(&mut rng, dev), rng.gen_bool(0.5))).collect();
    let base = (0..n_base).map(|_| (random_pat(&mut rng, dev), rng.gen_bool(0.5), rng.gen_bool(0.5))).collect();

    let n = rng.gen_range(1..=8);
    let flows = (0..n)
        .map(|i| {
            let remote = *REMOTES.choose(&mut rng).unwrap();
            let (src, dst) = if rng.gen_bool(0.5) { (HOST, remote) } else { (remote, HOST) };
            Flow {
                tick: delay + 1 + i as u64 * (2 * delay + 1),
                src,
                dst,
                sport: rng.gen_range(1000..1002),
                dport: *PORTS.choose(&mut rng).unwrap(),
                dev,
                tag: *[0u8, 0, 9].choose(&mut rng).unwrap(),
            }
        })
        .collect();
    Case { delay, full_session: rng.gen_bool(0.3), stages: all, manual, base, flows }
}

fn to_toml(c: &Case) -> String {
    let last = c.flows.last().unwrap().tick;
    let mut s = String::new();
    let _ = writeln!(s, "seed = 1\nticks = {}\nlink_delay = {}\nreport_interval = 100000\n", last + 2 * c.delay + 2, c.delay);
    s.push_str("[benign]\nexternal_nodes = 0\nhost_rate = 0.0\nlow_activity = []\n\n");
    let mut chain = Vec::new();
    for (i, st) in c.stages.iter().enumerate() {
        let id = i + 1;
        chain.push(id.to_string());
        match st {
            Stage::Firewall { allow, rules } => {
                let allow: Vec<String> = allow.iter().map(|a| format!("\"{a}\"")).collect();
                let _ = writeln!(s, "[[pool]]\nid = {id}\nkind = \"firewall\"\nallow = [{}]", allow.join(", "));
                for (pat, drop) in rules {
                    let _ = writeln!(s, "[[pool.rule]]\nverdict = \"{}\"\npattern = {}", verdict(*drop), pat.toml());
                }
            }
            Stage::Ids { port, rate } => {
                let _ = writeln!(s, "[[pool]]\nid = {id}\nkind = \"ids\"\n[[pool.signature]]\npattern = {{ dst_port = {port} }}");
                if let Some((max, window)) = rate {
                    let _ = writeln!(s, "max_flows = {max}\nwindow = {window}");
                }
            }
            Stage::Dpi => {
                let _ = writeln!(s, "[[pool]]\nid = {id}\nkind = \"dpi\"\nbanned_tags = [9]");
            }
        }
        s.push('\n');
    }
    let dev = c.flows[0].dev;
    let _ = writeln!(
        s,
        "[[segment]]\nname = \"micro\"\nsubnet = \"10.9.0.0/24\"\nhosts = [{{ device = {dev} }}]\nchains = {{ default = [{}] }}\nfull_session_routing = {}",
        chain.join(", "),
        c.full_session
    );
    for (pat, drop) in &c.manual {
        let _ = writeln!(s, "[[segment.manual]]\nverdict = \"{}\"\npattern = {}", verdict(*drop), pat.toml());
    }
    for (pat, drop, high) in &c.base {
        let _ = writeln!(
            s,
            "[[base_policy]]\nverdict = \"{}\"\npriority = \"{}\"\npattern = {}",
            verdict(*drop),
            if *high { "high" } else { "normal" },
            pat.toml()
        );
    }
    for f in &c.flows {
        let _ = writeln!(
            s,
            "[[flow]]\ntick = {}\nsegment = \"micro\"\nsrc = \"{}\"\ndst = \"{}\"\nsrc_port = {}\ndst_port = {}\ndevice = {}\ntag = {}",
            f.tick, f.src, f.dst, f.sport, f.dport, f.dev, f.tag
        );
    }
    s
}

fn verdict(drop: bool) -> &'static str {
    if drop {
        "drop"
    } else {
        "allow"
    }
}

/// Verdict of every flow, in order, computed without the simulator.
fn oracle(c: &Case) -> Vec<bool> {
    let mut next_id = 1;
    let mut store: Vec<Pol> = Vec::new();
    for (pat, drop, high) in &c.base {
        store.push(Pol { pat: *pat, proto_pinned: false, drop: *drop, prio: if *high { 2 } else { 1 }, issued: 0, id: next_id });
        next_id += 1;
    }
    let mut local: Vec<Pol> = c
        .manual
        .iter()
        .enumerate()
        .map(|(i, (pat, drop))| Pol { pat: *pat, proto_pinned: false, drop: *drop, prio: 3, issued: 0, id: i as u64 + 1 })
        .collect();
    // the bootstrap update carries every base policy
    local.extend(store.iter().copied());

    let mut history: BTreeMap<Ipv4Addr, Vec<u64>> = BTreeMap::new();
    let mut derived: BTreeSet<usize> = BTreeSet::new();
    let mut out = Vec::new();
    for f in &c.flows {
        if let Some(p) = best(&local, f) {
            out.push(p.drop);
            continue;
        }
        let now = f.tick + c.delay;
        if let Some(p) = best(&store, f).copied() {
            // narrower policies that the hit would shadow travel with it
            let shadowed: Vec<Pol> =
                store.iter().filter(|q| q.pat.overlaps(&p.pat) && q.key() > p.key()).copied().collect();
            local.push(p);
            local.extend(shadowed);
            out.push(p.drop);
            continue;
        }
        // (stage index, drop, firewall rule)
        let mut results: Vec<(usize, bool, Option<usize>)> = Vec::new();
        for (i, st) in c.stages.iter().enumerate() {
            let (drop, rule) = match st {
                Stage::Firewall { allow, rules } => {
                    if allow.contains(&f.dst) {
                        (false, None)
                    } else {
                        match rules.iter().position(|(p, _)| p.hits(f)) {
                            Some(r) => (rules[r].1, Some(r)),
                            None => (false, None),
                        }
                    }
                }
                Stage::Ids { port, rate } => {
                    let seen = history.entry(f.src).or_default();
                    if rate.is_some() {
                        seen.push(now);
                    }
                    let fired = f.dport == *port
                        && rate.is_none_or(|(max, window)| seen.iter().filter(|&&t| t + window > now).count() > max as usize);
                    (fired, None)
                }
                Stage::Dpi => (f.tag == 9, None),
            };
            results.push((i, drop, rule));
            if drop && !c.full_session {
                break;
            }
        }
        let deciding = *results.iter().find(|r| r.1).unwrap_or(results.last().unwrap());
        let drop = results.iter().any(|r| r.1);
        let minted = Pol {
            pat: Pat { src: Some(f.src), dst: Some(f.dst), sport: None, dport: Some(f.dport), dev: Some(f.dev) },
            proto_pinned: true,
            drop,
            prio: 1,
            issued: now,
            id: next_id,
        };
        next_id += 1;
        store.push(minted);
        local.push(minted);
        out.push(drop);

        if let (Stage::Firewall { allow, rules }, true, Some(r)) = (&c.stages[deciding.0], deciding.1, deciding.2) {
            if rules[r].0.dst.is_none() && derived.insert(r) {
                let general = rules[r].0;
                store.push(Pol { pat: general, proto_pinned: false, drop: true, prio: 1, issued: now, id: next_id });
                next_id += 1;
                for server in allow {
                    let pat = Pat { dst: Some(*server), ..general };
                    store.push(Pol { pat, proto_pinned: false, drop: false, prio: 1, issued: now, id: next_id });
                    next_id += 1;
                }
            }
        }
    }
    out
}

/// Runs micro-scenario `seed` through the simulator and the oracle;
/// `Err` describes the first disagreement.
pub fn check_case(seed: u64) -> Result<(), String> {
    let case = random_case(seed);
    let text = to_toml(&case);
    let sc = Scenario::parse(&text).map_err(|e| format!("case {seed}: {e}\n{text}"))?;
    let run = run_scenario(&sc).map_err(|e| format!("case {seed}: {e}"))?;
    if run.flows.len() != case.flows.len() {
        return Err(format!("case {seed}: {} flows recorded\n{text}", run.flows.len()));
    }
    let mut got = Vec::with_capacity(run.flows.len());
    for r in &run.flows {
        if r.decision == Some(edgeguard::sim::Decision::Timeout) {
            return Err(format!("case {seed}: flow timed out\n{text}"));
        }
        match r.verdict {
            Some(v) => got.push(v.is_drop()),
            None => return Err(format!("case {seed}: undecided flow\n{text}")),
        }
    }
    let want = oracle(&case);
    if got != want {
        return Err(format!("case {seed}: got {got:?}, oracle {want:?}\n{text}"));
    }
    Ok(())
}
