//! Bulk transfers between two datapaths over lossy links, with the receive
//! side checked byte for byte against what the sender posted.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SimConfig;
use crate::datapath::{tick_all, Datapath, Environment, SimWorld};
use crate::protocols::roce::OpKind;
use crate::protocols::{rx_base, tx_base, RoceConfig, RoceProgram, TcpConfig, TcpProgram};
use crate::reassembly::Notify;
use crate::types::{Cycle, FlowId};

use super::link::{Link, LinkConfig, LinkStats};

const FLOW: FlowId = FlowId(0);
const WRITE_BASE: u64 = 5 << 44;
const READ_SRC: u64 = 6 << 44;
const READ_DEST: u64 = 7 << 44;

/// A notification together with the bytes it made visible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub notify: Notify,
    pub data: Vec<u8>,
}

/// Two nodes joined by one link per direction. Node 0 is the sender.
pub struct PairEnv {
    pub links: [Link; 2],
    pub delivered: [Vec<Delivery>; 2],
}

impl PairEnv {
    pub fn new(link: &LinkConfig, seed: u64) -> Self {
        Self {
            links: [
                Link::new(link.clone(), seed.wrapping_mul(2)),
                Link::new(link.clone(), seed.wrapping_mul(2) + 1),
            ],
            delivered: [Vec::new(), Vec::new()],
        }
    }
}

impl Environment for PairEnv {
    fn deliver(&mut self, now: Cycle, nodes: &mut [Datapath]) {
        for (i, link) in self.links.iter_mut().enumerate() {
            for p in link.tick(now) {
                nodes[1 - i].push_rx(p);
            }
        }
    }

    fn collect(&mut self, now: Cycle, nodes: &mut [Datapath]) {
        for (i, link) in self.links.iter_mut().enumerate() {
            for w in nodes[i].take_tx() {
                link.send(w.end_cycle.max(now) + 1, w.bytes);
            }
            for n in nodes[i].take_notifies() {
                let data = nodes[i].host().read(n.app_addr, n.bytes as usize);
                self.delivered[i].push(Delivery { notify: n, data });
            }
        }
    }
}

fn pattern(seed: u64, len: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamReport {
    pub bytes: u64,
    pub delivered: u64,
    /// Every notification continued the stream exactly where the previous one ended.
    pub in_order: bool,
    pub mismatched_bytes: u64,
    pub cycles: Cycle,
    pub links: [LinkStats; 2],
}

impl StreamReport {
    pub fn exact(&self) -> bool {
        self.in_order && self.delivered == self.bytes && self.mismatched_bytes == 0
    }
}

/// Sends `bytes` of a pseudo-random stream from node 0 to node 1 over TCP.
pub fn tcp_stream(
    sim: &SimConfig,
    tcp: &TcpConfig,
    link: &LinkConfig,
    bytes: u32,
    seed: u64,
    budget: Cycle,
) -> StreamReport {
    let p = Arc::new(TcpProgram::new(sim, tcp.clone()));
    let nodes = (0..2).map(|_| Datapath::new(sim, p.clone())).collect();
    let mut world = SimWorld::new(nodes, PairEnv::new(link, seed));
    let data = pattern(seed, bytes as usize);
    world.nodes[0].host_mut().write(tx_base(FLOW), &data);
    world.nodes[0].submit(p.app_send(FLOW, bytes));
    let mut rx_next = 0u64;
    let mut in_order = true;
    let mut mismatched = 0u64;
    let mut seen = 0;
    while world.now() < budget && rx_next < bytes as u64 {
        tick_all(&mut world);
        for d in &world.env.delivered[1][seen..] {
            let n = &d.notify;
            if n.app_addr != rx_base(FLOW) + rx_next {
                in_order = false;
            }
            let off = (n.app_addr - rx_base(FLOW)) as usize;
            let want = data.get(off..off + d.data.len()).unwrap_or(&[]);
            mismatched += d.data.iter().zip(want).filter(|(a, b)| a != b).count() as u64;
            mismatched += (d.data.len() - want.len()) as u64;
            rx_next += n.bytes as u64;
        }
        seen = world.env.delivered[1].len();
    }
    StreamReport {
        bytes: bytes as u64,
        delivered: rx_next,
        in_order,
        mismatched_bytes: mismatched,
        cycles: world.now(),
        links: [world.env.links[0].stats(), world.env.links[1].stats()],
    }
}

/// One posted work request and where its payload must land.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub kind: OpKind,
    pub len: u32,
    /// Node that receives the payload.
    pub sink: usize,
    pub dest: u64,
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MessageReport {
    pub messages: usize,
    pub completed: usize,
    /// Messages finished in posting order on each receiving node.
    pub in_order: bool,
    pub mismatched_bytes: u64,
    /// Bytes delivered more than once.
    pub duplicate_bytes: u64,
    /// Responder's count of completed inbound messages.
    pub responder_msn: u32,
    pub cycles: Cycle,
    pub links: [LinkStats; 2],
}

impl MessageReport {
    pub fn exact(&self) -> bool {
        self.completed == self.messages
            && self.in_order
            && self.mismatched_bytes == 0
            && self.duplicate_bytes == 0
            && self.responder_msn as usize == self.messages
    }
}

/// Random mix of sends, writes and reads of 1 to `max_len` bytes.
pub fn message_mix(count: usize, max_len: u32, seed: u64) -> Vec<Message> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut send_off, mut write_off, mut read_off) = (0u64, 0u64, 0u64);
    (0..count)
        .map(|i| {
            let len = rng.gen_range(1..=max_len);
            let data = pattern(seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9), len as usize);
            let (kind, sink, dest) = match rng.gen_range(0..3) {
                0 => {
                    send_off += len as u64;
                    (OpKind::Send, 1, rx_base(FLOW) + send_off - len as u64)
                }
                1 => {
                    write_off += len as u64;
                    (OpKind::Write, 1, WRITE_BASE + write_off - len as u64)
                }
                _ => {
                    read_off += len as u64;
                    (OpKind::Read, 0, READ_DEST + read_off - len as u64)
                }
            };
            Message {
                kind,
                len,
                sink,
                dest,
                data,
            }
        })
        .collect()
}

/// Posts `messages` from node 0 over RoCE, keeping the send queue within capacity.
pub fn roce_messages(
    sim: &SimConfig,
    roce: &RoceConfig,
    link: &LinkConfig,
    messages: &[Message],
    seed: u64,
    budget: Cycle,
) -> MessageReport {
    let p = Arc::new(RoceProgram::new(sim, roce.clone()));
    let nodes = (0..2).map(|_| Datapath::new(sim, p.clone())).collect();
    let mut world = SimWorld::new(nodes, PairEnv::new(link, seed));
    let mut backlog = VecDeque::new();
    let mut src = tx_base(FLOW);
    let mut read_src = READ_SRC;
    for (i, m) in messages.iter().enumerate() {
        let (local, remote) = match m.kind {
            OpKind::Read => {
                world.nodes[1].host_mut().write(read_src, &m.data);
                read_src += m.len as u64;
                (m.dest, read_src - m.len as u64)
            }
            _ => {
                world.nodes[0].host_mut().write(src, &m.data);
                src += m.len as u64;
                (src - m.len as u64, if m.kind == OpKind::Write { m.dest } else { 0 })
            }
        };
        backlog.push_back((i, m.kind, m.len, local, remote));
    }

    // Byte ranges per sink, sorted by destination, for mapping notifies back to messages.
    let mut ranges: [Vec<(u64, u64, usize)>; 2] = [Vec::new(), Vec::new()];
    for (i, m) in messages.iter().enumerate() {
        ranges[m.sink].push((m.dest, m.dest + m.len as u64, i));
    }
    for r in &mut ranges {
        r.sort_unstable();
    }
    let mut remaining: Vec<u64> = messages.iter().map(|m| m.len as u64).collect();
    let mut got: Vec<Vec<bool>> = messages.iter().map(|m| vec![false; m.len as usize]).collect();
    let mut done = vec![false; messages.len()];
    let mut last_done: [Option<usize>; 2] = [None, None];
    let (mut in_order, mut mismatched, mut dup) = (true, 0u64, 0u64);
    let mut completed = 0;
    let mut seen = [0usize; 2];
    let mut submitted = 0u32;
    while world.now() < budget && completed < messages.len() {
        let s = p.state(world.nodes[0].contexts().get(FLOW));
        let mut in_system = (submitted - s.posted) as usize + s.ops.len();
        while in_system < roce.ops_capacity {
            let Some((_, kind, len, local, remote)) = backlog.pop_front() else {
                break;
            };
            world.nodes[0].submit(p.wqe(FLOW, kind, len, local, remote));
            submitted += 1;
            in_system += 1;
        }
        tick_all(&mut world);
        for sink in 0..2 {
            for d in &world.env.delivered[sink][seen[sink]..] {
                let a = d.notify.app_addr;
                let k = ranges[sink].partition_point(|r| r.0 <= a);
                let Some(&(lo, hi, i)) = k.checked_sub(1).map(|k| &ranges[sink][k]) else {
                    mismatched += d.data.len() as u64;
                    continue;
                };
                if a + d.data.len() as u64 > hi {
                    mismatched += d.data.len() as u64;
                    continue;
                }
                let off = (a - lo) as usize;
                for (j, &b) in d.data.iter().enumerate() {
                    if got[i][off + j] {
                        dup += 1;
                    } else {
                        got[i][off + j] = true;
                        remaining[i] -= 1;
                    }
                    if messages[i].data[off + j] != b {
                        mismatched += 1;
                    }
                }
                if remaining[i] == 0 && !done[i] {
                    if last_done[sink].is_some_and(|p| p >= i) {
                        in_order = false;
                    }
                    last_done[sink] = Some(i);
                    done[i] = true;
                    completed += 1;
                }
            }
            seen[sink] = world.env.delivered[sink].len();
        }
    }
    MessageReport {
        messages: messages.len(),
        completed,
        in_order,
        mismatched_bytes: mismatched,
        duplicate_bytes: dup,
        responder_msn: p.state(world.nodes[1].contexts().get(FLOW)).msn,
        cycles: world.now(),
        links: [world.env.links[0].stats(), world.env.links[1].stats()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lossless_stream_is_exact() {
        let r = tcp_stream(
            &SimConfig::default(),
            &TcpConfig::default(),
            &LinkConfig::default(),
            50_000,
            3,
            200_000,
        );
        assert!(r.exact(), "{r:?}");
    }

    #[test]
    fn lossless_messages_are_exact() {
        let msgs = message_mix(60, 3000, 5);
        let r = roce_messages(
            &SimConfig::default(),
            &RoceConfig::default(),
            &LinkConfig::default(),
            &msgs,
            5,
            500_000,
        );
        assert!(r.exact(), "{r:?}");
    }
}
