//! Key-value request/response workload between a client and a server datapath.
//!
//! The client issues fixed-size keys open loop at a uniform rate; the server
//! answers each key with a fixed-size value whose first four bytes echo the
//! request id. Latency runs from request generation to the notification that
//! completes the response on the client.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::datapath::{tick_all, Datapath, Environment, SimWorld};
use crate::protocols::roce::OpKind;
use crate::protocols::{rx_base, tx_base, ProtocolKind, RoceConfig, RoceProgram, TcpConfig, TcpProgram};
use crate::types::{Cycle, FlowId};

use super::link::{DrainWindow, Link, LinkConfig, LinkStats, QueueMode};
use super::metrics::{summarize, Summary};

pub const CLIENT: usize = 0;
pub const SERVER: usize = 1;
const FLOW: FlowId = FlowId(0);
/// Server-side table of values addressed by one-sided reads.
const VALUE_BASE: u64 = 3 << 44;
const READ_DEST: u64 = 4 << 44;
const VALUE_SLOTS: u64 = 1024;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvOp {
    /// Two-sided: request and response are both sends.
    #[default]
    Send,
    /// One-sided: the client reads the value from server memory.
    Read,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Client to server.
    #[default]
    Request,
    /// Server to client.
    Response,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KvConfig {
    pub protocol: ProtocolKind,
    pub queue_kb: u64,
    /// Requests per second.
    pub request_rate: f64,
    pub key_size: u32,
    pub value_size: u32,
    /// Drain-rate reduction is applied when set.
    pub congestion: bool,
    pub congestion_start: Cycle,
    pub congestion_cycles: Cycle,
    /// Congested drain rate as a fraction of the request byte rate.
    pub congestion_factor: f64,
    pub congested_link: Direction,
    /// Cycles during which requests are generated.
    pub generate_cycles: Cycle,
    /// Upper bound on simulated cycles.
    pub cycle_budget: Cycle,
    pub kv_op: KvOp,
    pub loss_rate: f64,
    pub seed: u64,
}

impl Default for KvConfig {
    fn default() -> Self {
        Self {
            protocol: ProtocolKind::TcpAimd,
            queue_kb: 12,
            request_rate: 8e6,
            key_size: 4,
            value_size: 64,
            congestion: true,
            congestion_start: 20_000,
            congestion_cycles: 50_000,
            congestion_factor: 0.5,
            congested_link: Direction::Request,
            generate_cycles: 100_000,
            cycle_budget: 2_000_000,
            kv_op: KvOp::Send,
            loss_rate: 0.0,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseStats {
    pub phase: &'static str,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvReport {
    pub protocol: ProtocolKind,
    pub queue_kb: u64,
    pub requests: usize,
    pub answered: usize,
    /// False when the cycle budget ran out before every response arrived.
    pub complete: bool,
    pub cycles: Cycle,
    pub phases: Vec<PhaseStats>,
    pub links: [LinkStats; 2],
    /// (issue cycle, latency) per answered request, in id order.
    pub samples: Vec<(Cycle, Cycle)>,
}

impl KvReport {
    pub fn phase(&self, name: &str) -> Summary {
        self.phases
            .iter()
            .find(|p| p.phase == name)
            .map(|p| p.summary)
            .unwrap_or_default()
    }
}

enum Stack {
    Tcp(Arc<TcpProgram>),
    Roce(Arc<RoceProgram>),
}

/// Per-node application state.
#[derive(Default)]
struct App {
    /// Received stream bytes not yet consumed.
    rx: Vec<u8>,
    rx_next: u64,
    tx_off: u64,
    /// RoCE work requests waiting for send-queue space: (kind, len, local, remote).
    backlog: VecDeque<(OpKind, u32, u64, u64)>,
    submitted: u32,
}

pub struct KvEnv {
    cfg: KvConfig,
    stack: Stack,
    links: [Link; 2],
    interval: f64,
    next_id: u64,
    issued: Vec<Cycle>,
    latency: Vec<Option<Cycle>>,
    answered: usize,
    apps: [App; 2],
}

impl KvEnv {
    fn value(&self, id: u32) -> Vec<u8> {
        let mut v = vec![0u8; self.cfg.value_size as usize];
        v[..4].copy_from_slice(&id.to_le_bytes());
        for (i, b) in v.iter_mut().enumerate().skip(4) {
            *b = (id as usize).wrapping_mul(31).wrapping_add(i) as u8;
        }
        v
    }

    fn generate(&mut self, now: Cycle, nodes: &mut [Datapath]) {
        while now < self.cfg.generate_cycles && (self.next_id as f64 * self.interval) as Cycle <= now {
            let id = self.next_id as u32;
            self.next_id += 1;
            self.issued.push(now);
            self.latency.push(None);
            let mut key = vec![0u8; self.cfg.key_size as usize];
            key[..4].copy_from_slice(&id.to_le_bytes());
            let client = &mut nodes[CLIENT];
            match (&self.stack, self.cfg.kv_op) {
                (Stack::Tcp(p), _) => {
                    let app = &mut self.apps[CLIENT];
                    client.host_mut().write(tx_base(FLOW) + app.tx_off, &key);
                    app.tx_off += key.len() as u64;
                    client.submit(p.app_send(FLOW, key.len() as u32));
                }
                (Stack::Roce(_), KvOp::Send) => {
                    let addr = tx_base(FLOW) + id as u64 * self.cfg.key_size as u64;
                    client.host_mut().write(addr, &key);
                    self.apps[CLIENT]
                        .backlog
                        .push_back((OpKind::Send, key.len() as u32, addr, 0));
                }
                (Stack::Roce(_), KvOp::Read) => {
                    let v = self.cfg.value_size as u64;
                    self.apps[CLIENT].backlog.push_back((
                        OpKind::Read,
                        v as u32,
                        READ_DEST + id as u64 * v,
                        VALUE_BASE + (id as u64 % VALUE_SLOTS) * v,
                    ));
                }
            }
        }
    }

    /// Posts backlogged work requests while the send queue has room.
    fn post(&mut self, nodes: &mut [Datapath]) {
        let Stack::Roce(p) = &self.stack else {
            return;
        };
        for (n, app) in self.apps.iter_mut().enumerate() {
            if app.backlog.is_empty() {
                continue;
            }
            let s = p.state(nodes[n].contexts().get(FLOW));
            let mut in_system = (app.submitted - s.posted) as usize + s.ops.len();
            while in_system < p.config().ops_capacity {
                let Some((kind, len, local, remote)) = app.backlog.pop_front() else {
                    break;
                };
                nodes[n].submit(p.wqe(FLOW, kind, len, local, remote));
                app.submitted += 1;
                in_system += 1;
            }
        }
    }

    fn record(&mut self, id: u32, now: Cycle) {
        let slot = &mut self.latency[id as usize];
        assert!(slot.is_none(), "response {id} delivered twice");
        *slot = Some(now - self.issued[id as usize]);
        self.answered += 1;
    }

    fn serve(&mut self, nodes: &mut [Datapath]) {
        let notes = nodes[SERVER].take_notifies();
        let key = self.cfg.key_size as usize;
        for n in notes {
            let data = nodes[SERVER].host().read(n.app_addr, n.bytes as usize);
            match &self.stack {
                Stack::Tcp(p) => {
                    let app = &mut self.apps[SERVER];
                    assert_eq!(n.app_addr, rx_base(FLOW) + app.rx_next, "server stream out of order");
                    app.rx_next += n.bytes as u64;
                    app.rx.extend_from_slice(&data);
                    let keys = app.rx.len() / key;
                    let ids: Vec<u32> = app
                        .rx
                        .drain(..keys * key)
                        .collect::<Vec<_>>()
                        .chunks(key)
                        .map(|k| u32::from_le_bytes(k[..4].try_into().unwrap()))
                        .collect();
                    if ids.is_empty() {
                        continue;
                    }
                    let mut out = Vec::new();
                    for id in ids {
                        out.extend(self.value(id));
                    }
                    let app = &mut self.apps[SERVER];
                    nodes[SERVER].host_mut().write(tx_base(FLOW) + app.tx_off, &out);
                    app.tx_off += out.len() as u64;
                    nodes[SERVER].submit(p.app_send(FLOW, out.len() as u32));
                }
                Stack::Roce(_) => {
                    assert_eq!(n.bytes as usize, key, "request split across packets");
                    let id = u32::from_le_bytes(data[..4].try_into().unwrap());
                    let v = self.value(id);
                    let addr = tx_base(FLOW) + id as u64 * v.len() as u64;
                    nodes[SERVER].host_mut().write(addr, &v);
                    self.apps[SERVER]
                        .backlog
                        .push_back((OpKind::Send, v.len() as u32, addr, 0));
                }
            }
        }
    }

    fn receive(&mut self, nodes: &mut [Datapath]) {
        let notes = nodes[CLIENT].take_notifies();
        let vlen = self.cfg.value_size as usize;
        for n in notes {
            let data = nodes[CLIENT].host().read(n.app_addr, n.bytes as usize);
            match (&self.stack, self.cfg.kv_op) {
                (Stack::Tcp(_), _) => {
                    let app = &mut self.apps[CLIENT];
                    assert_eq!(n.app_addr, rx_base(FLOW) + app.rx_next, "client stream out of order");
                    app.rx_next += n.bytes as u64;
                    app.rx.extend_from_slice(&data);
                    let whole = app.rx.len() / vlen;
                    let values: Vec<Vec<u8>> = app
                        .rx
                        .drain(..whole * vlen)
                        .collect::<Vec<_>>()
                        .chunks(vlen)
                        .map(|c| c.to_vec())
                        .collect();
                    for v in values {
                        let id = u32::from_le_bytes(v[..4].try_into().unwrap());
                        assert_eq!(v, self.value(id), "corrupt value for request {id}");
                        self.record(id, n.cycle);
                    }
                }
                (Stack::Roce(_), KvOp::Send) => {
                    assert_eq!(n.bytes as usize, vlen, "response split across packets");
                    let id = u32::from_le_bytes(data[..4].try_into().unwrap());
                    assert_eq!(data, self.value(id), "corrupt value for request {id}");
                    self.record(id, n.cycle);
                }
                (Stack::Roce(_), KvOp::Read) => {
                    let id = ((n.app_addr - READ_DEST) / vlen as u64) as u32;
                    let slot = (id as u64 % VALUE_SLOTS) as u32;
                    assert_eq!(data, self.value(slot), "corrupt value read for request {id}");
                    self.record(id, n.cycle);
                }
            }
        }
    }
}

impl Environment for KvEnv {
    fn deliver(&mut self, now: Cycle, nodes: &mut [Datapath]) {
        for (i, link) in self.links.iter_mut().enumerate() {
            for p in link.tick(now) {
                nodes[1 - i].push_rx(p);
            }
        }
        self.generate(now, nodes);
        self.post(nodes);
    }

    fn collect(&mut self, now: Cycle, nodes: &mut [Datapath]) {
        for (i, link) in self.links.iter_mut().enumerate() {
            for w in nodes[i].take_tx() {
                link.send(w.end_cycle.max(now) + 1, w.bytes);
            }
        }
        self.serve(nodes);
        self.receive(nodes);
    }
}

/// Everything needed to run one end-to-end point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvSetup {
    pub sim: SimConfig,
    pub tcp: TcpConfig,
    pub roce: RoceConfig,
    pub link: LinkConfig,
    pub kv: KvConfig,
}

impl KvSetup {
    /// Wire bytes of one request packet.
    pub fn request_bytes(&self) -> f64 {
        (self.sim.pktgen.header_bytes() + self.cfg_key() as usize) as f64
    }

    fn cfg_key(&self) -> u32 {
        self.kv.key_size
    }

    /// Requests per cycle.
    pub fn request_per_cycle(&self) -> f64 {
        self.kv.request_rate / self.sim.global.clock_freq
    }

    pub fn congested_rate(&self) -> f64 {
        self.kv.congestion_factor * self.request_per_cycle() * self.request_bytes()
    }
}

pub fn build_world(setup: &KvSetup) -> SimWorld<KvEnv> {
    let kv = &setup.kv;
    assert!(kv.key_size >= 4 && kv.value_size >= 4, "keys and values carry a 4-byte id");
    let (stack, nodes): (Stack, Vec<Datapath>) = match kv.protocol {
        ProtocolKind::TcpAimd => {
            let p = Arc::new(TcpProgram::new(&setup.sim, setup.tcp.clone()));
            let nodes = (0..2).map(|_| Datapath::new(&setup.sim, p.clone())).collect();
            (Stack::Tcp(p), nodes)
        }
        ProtocolKind::Rocev2Dcqcn => {
            let p = Arc::new(RoceProgram::new(&setup.sim, setup.roce.clone()));
            let nodes = (0..2).map(|_| Datapath::new(&setup.sim, p.clone())).collect();
            (Stack::Roce(p), nodes)
        }
    };
    let mode = match kv.protocol {
        ProtocolKind::TcpAimd => QueueMode::DropTail,
        ProtocolKind::Rocev2Dcqcn => QueueMode::EcnMark,
    };
    let link_cfg = LinkConfig {
        queue_capacity: Some(kv.queue_kb * 1024),
        mode,
        loss_rate: kv.loss_rate,
        ..setup.link.clone()
    };
    let window = DrainWindow {
        start: kv.congestion_start,
        end: kv.congestion_start + kv.congestion_cycles,
        rate: setup.congested_rate(),
    };
    let mut links = [
        Link::new(link_cfg.clone(), kv.seed.wrapping_mul(2)),
        Link::new(link_cfg, kv.seed.wrapping_mul(2) + 1),
    ];
    if kv.congestion {
        let i = match kv.congested_link {
            Direction::Request => CLIENT,
            Direction::Response => SERVER,
        };
        let l = std::mem::replace(&mut links[i], Link::new(LinkConfig::default(), 0));
        links[i] = l.with_window(window);
    }
    let env = KvEnv {
        interval: 1.0 / setup.request_per_cycle(),
        cfg: kv.clone(),
        stack,
        links,
        next_id: 0,
        issued: Vec::new(),
        latency: Vec::new(),
        answered: 0,
        apps: [App::default(), App::default()],
    };
    let mut world = SimWorld::new(nodes, env);
    if kv.kv_op == KvOp::Read {
        for slot in 0..VALUE_SLOTS as u32 {
            let v = world.env.value(slot);
            world.nodes[SERVER]
                .host_mut()
                .write(VALUE_BASE + slot as u64 * v.len() as u64, &v);
        }
    }
    world
}

pub fn run(setup: &KvSetup) -> KvReport {
    let mut world = build_world(setup);
    let kv = &setup.kv;
    while world.now() < kv.cycle_budget {
        tick_all(&mut world);
        let env = &world.env;
        if world.now() >= kv.generate_cycles && env.answered == env.issued.len() {
            break;
        }
    }
    report(setup, &world)
}

pub fn report(setup: &KvSetup, world: &SimWorld<KvEnv>) -> KvReport {
    let env = &world.env;
    let kv = &setup.kv;
    let window = (kv.congestion_start, kv.congestion_start + kv.congestion_cycles);
    let samples: Vec<(Cycle, Cycle)> = env
        .issued
        .iter()
        .zip(&env.latency)
        .filter_map(|(&t, l)| l.map(|l| (t, l)))
        .collect();
    let pick = |f: &dyn Fn(Cycle) -> bool| -> Vec<u64> {
        samples.iter().filter(|(t, _)| f(*t)).map(|&(_, l)| l).collect()
    };
    let phases = vec![
        PhaseStats {
            phase: "baseline",
            summary: summarize(&pick(&|t| t < window.0)),
        },
        PhaseStats {
            phase: "congested",
            summary: summarize(&pick(&|t| t >= window.0 && t < window.1)),
        },
        PhaseStats {
            phase: "overall",
            summary: summarize(&pick(&|_| true)),
        },
    ];
    KvReport {
        protocol: kv.protocol,
        queue_kb: kv.queue_kb,
        requests: env.issued.len(),
        answered: env.answered,
        complete: env.answered == env.issued.len(),
        cycles: world.now(),
        phases,
        links: [env.links[0].stats(), env.links[1].stats()],
        samples,
    }
}
