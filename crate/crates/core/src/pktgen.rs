//! Instruction-driven packet generator.
//!
//! Each flow owns a ring of packet-generation instructions. Payload is
//! prefetched from host memory into a per-flow buffer in bounded requests; an
//! arbiter interleaves flows round-robin, giving each selected instruction a
//! slice of up to `preempt_quantum` packets. The wire side emits at most one
//! bus beat per cycle.

use std::collections::VecDeque;

use crate::bits::BitVector;
use crate::config::{SimConfig, CHUNK_BYTES};
use crate::instr::{Pacing, PktGenInstr};
use crate::memory::{MemoryPort, SparseMemory};
use crate::ple::ProtocolProgram;
use crate::types::{Cycle, FlowId};

/// A packet as it left the generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WirePacket {
    pub flow: FlowId,
    pub start_cycle: Cycle,
    /// Cycle in which the last beat was emitted.
    pub end_cycle: Cycle,
    pub header_len: usize,
    pub bytes: Vec<u8>,
}

impl WirePacket {
    pub fn payload(&self) -> &[u8] {
        &self.bytes[self.header_len..]
    }
}

#[derive(Debug)]
struct Queued {
    id: u64,
    instr: PktGenInstr,
    header: BitVector,
    bytes_sent: u32,
    requested: u32,
    /// Prefetched payload not yet placed on the wire.
    data: VecDeque<u8>,
}

impl Queued {
    fn finished(&self) -> bool {
        if self.instr.is_header_only() {
            false
        } else {
            self.bytes_sent == self.instr.total_len
        }
    }

    fn next_payload(&self) -> u32 {
        if self.instr.is_header_only() {
            0
        } else {
            self.instr.next_payload_len(self.bytes_sent)
        }
    }

    fn unrequested(&self) -> u32 {
        self.instr.total_len - self.requested
    }
}

#[derive(Debug, Default)]
struct FlowGen {
    queue: VecDeque<Queued>,
    tokens: f64,
    refilled_at: Cycle,
    credit: u64,
    outstanding: u32,
    in_rr: bool,
    in_fetch_rr: bool,
}

impl FlowGen {
    fn buffered(&self) -> u32 {
        self.queue.iter().map(|q| q.data.len() as u32).sum::<u32>() + self.outstanding
    }
}

#[derive(Debug)]
struct Fetch {
    done: Cycle,
    flow: FlowId,
    instr_id: u64,
    addr: u64,
    len: u32,
}

#[derive(Debug)]
struct Slice {
    flow: FlowId,
    instr_id: u64,
    packets: u32,
}

#[derive(Debug)]
struct Tx {
    packet: WirePacket,
    beats: u32,
    sent: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PktGenStats {
    pub packets: u64,
    pub beat_bytes: u64,
    pub payload_bytes: u64,
    pub instructions_done: u64,
    pub preemptions: u64,
    pub fetches: u64,
}

#[derive(Debug)]
pub struct PacketGenerator {
    flows: Vec<FlowGen>,
    rr: VecDeque<FlowId>,
    fetch_rr: VecDeque<FlowId>,
    fetches: VecDeque<Fetch>,
    port: MemoryPort,
    slice: Option<Slice>,
    tx: Option<Tx>,
    last_start: Option<Cycle>,
    next_id: u64,
    queue_depth: usize,
    quantum: u32,
    fetch_size: u32,
    buffer_bytes: u32,
    threshold_bytes: u32,
    bp_threshold: usize,
    header_bytes: usize,
    bus_width: u32,
    stats: PktGenStats,
}

impl PacketGenerator {
    pub fn new(cfg: &SimConfig) -> Self {
        let p = &cfg.pktgen;
        Self {
            flows: (0..cfg.global.flow_count).map(|_| FlowGen::default()).collect(),
            rr: VecDeque::new(),
            fetch_rr: VecDeque::new(),
            fetches: VecDeque::new(),
            port: MemoryPort::new(cfg.memory.access_latency, cfg.memory.bandwidth),
            slice: None,
            tx: None,
            last_start: None,
            next_id: 0,
            queue_depth: p.instr_queue_depth,
            quantum: p.preempt_quantum.max(1),
            fetch_size: p.fetch_size as u32,
            buffer_bytes: (p.prefetch_buffer_len * CHUNK_BYTES) as u32,
            threshold_bytes: (p.prefetch_threshold_chunks() * CHUNK_BYTES) as u32,
            bp_threshold: p.backpressure_threshold(),
            header_bytes: p.header_bytes(),
            bus_width: cfg.global.bus_width as u32,
            stats: PktGenStats::default(),
        }
    }

    pub fn stats(&self) -> PktGenStats {
        self.stats
    }

    /// Unfinished instructions of the flow, including the one being sent.
    pub fn occupancy(&self, f: FlowId) -> usize {
        self.flows[f.index()].queue.len()
    }

    pub fn has_room(&self, f: FlowId) -> bool {
        self.occupancy(f) < self.queue_depth
    }

    pub fn wants_backpressure(&self, f: FlowId) -> bool {
        self.occupancy(f) > self.bp_threshold
    }

    pub fn is_idle(&self) -> bool {
        self.tx.is_none() && self.flows.iter().all(|g| g.queue.is_empty())
    }

    pub fn enqueue(&mut self, instr: PktGenInstr) {
        let f = instr.flow;
        assert!(
            self.has_room(f),
            "packet-generation queue of flow {f} overflowed; backpressure failed"
        );
        assert!(
            instr.is_header_only() || instr.seg_size <= self.buffer_bytes,
            "segment size {} exceeds the prefetch buffer",
            instr.seg_size
        );
        assert_eq!(
            instr.header.width(),
            self.header_bytes * 8,
            "header width mismatch"
        );
        let id = self.next_id;
        self.next_id += 1;
        let g = &mut self.flows[f.index()];
        if let Some(Pacing::Credit { bytes }) = instr.pacing {
            g.credit += bytes;
        }
        let needs_fetch = !instr.is_header_only();
        g.queue.push_back(Queued {
            id,
            header: instr.header.clone(),
            instr,
            bytes_sent: 0,
            requested: 0,
            data: VecDeque::new(),
        });
        let active = self.slice.as_ref().is_some_and(|s| s.flow == f);
        if !g.in_rr && !active {
            g.in_rr = true;
            self.rr.push_back(f);
        }
        if needs_fetch && !g.in_fetch_rr {
            g.in_fetch_rr = true;
            self.fetch_rr.push_back(f);
        }
    }

    pub fn tick(
        &mut self,
        now: Cycle,
        host: &SparseMemory,
        program: &dyn ProtocolProgram,
    ) -> Option<WirePacket> {
        self.complete_fetches(now, host);
        let done = self.emit(now, program);
        self.issue_fetch(now);
        done
    }

    fn complete_fetches(&mut self, now: Cycle, host: &SparseMemory) {
        while self.fetches.front().is_some_and(|f| f.done <= now) {
            let f = self.fetches.pop_front().unwrap();
            let g = &mut self.flows[f.flow.index()];
            g.outstanding -= f.len;
            let q = g
                .queue
                .iter_mut()
                .find(|q| q.id == f.instr_id)
                .expect("fetch completed for a retired instruction");
            let mut buf = vec![0u8; f.len as usize];
            host.read_into(f.addr, &mut buf);
            q.data.extend(buf);
        }
    }

    fn issue_fetch(&mut self, now: Cycle) {
        for _ in 0..self.fetch_rr.len() {
            let f = self.fetch_rr.pop_front().unwrap();
            let g = &mut self.flows[f.index()];
            let buffered = g.buffered();
            let Some(q) = g.queue.iter_mut().find(|q| q.unrequested() > 0) else {
                g.in_fetch_rr = false;
                continue;
            };
            if buffered >= self.threshold_bytes {
                self.fetch_rr.push_back(f);
                continue;
            }
            let len = self
                .fetch_size
                .min(q.unrequested())
                .min(self.buffer_bytes - buffered);
            let addr = q.instr.data_addr + q.requested as u64;
            q.requested += len;
            let instr_id = q.id;
            g.outstanding += len;
            let still = g.queue.iter().any(|q| q.unrequested() > 0);
            if still {
                self.fetch_rr.push_back(f);
            } else {
                g.in_fetch_rr = false;
            }
            let done = self.port.issue(now, len);
            self.fetches.push_back(Fetch {
                done,
                flow: f,
                instr_id,
                addr,
                len,
            });
            self.stats.fetches += 1;
            return;
        }
    }

    fn startable(&mut self, now: Cycle, f: FlowId) -> bool {
        let header_bytes = self.header_bytes as u64;
        let g = &mut self.flows[f.index()];
        let Some(q) = g.queue.front() else {
            return false;
        };
        let p = q.next_payload();
        if (q.data.len() as u32) < p {
            return false;
        }
        let wire = header_bytes + p as u64;
        match q.instr.pacing {
            Some(Pacing::Rate { bytes_per_cycle }) => {
                let cap = 2.0 * (header_bytes + q.instr.seg_size as u64) as f64;
                let dt = (now - g.refilled_at) as f64;
                g.tokens = (g.tokens + bytes_per_cycle * dt).min(cap);
                g.refilled_at = now;
                g.tokens >= wire as f64
            }
            Some(Pacing::Credit { .. }) => g.credit >= wire,
            None => true,
        }
    }

    fn end_slice(&mut self) {
        if let Some(s) = self.slice.take() {
            let g = &mut self.flows[s.flow.index()];
            debug_assert!(!g.in_rr);
            if !g.queue.is_empty() {
                g.in_rr = true;
                self.rr.push_back(s.flow);
            }
        }
    }

    fn emit(&mut self, now: Cycle, program: &dyn ProtocolProgram) -> Option<WirePacket> {
        if self.tx.is_none() {
            self.try_start(now, program);
        }
        let tx = self.tx.as_mut()?;
        let offset = tx.sent * self.bus_width;
        let beat = (tx.packet.bytes.len() as u32 - offset).min(self.bus_width);
        self.stats.beat_bytes += beat as u64;
        tx.sent += 1;
        if tx.sent < tx.beats {
            return None;
        }
        let mut tx = self.tx.take().unwrap();
        tx.packet.end_cycle = now;
        Some(tx.packet)
    }

    fn try_start(&mut self, now: Cycle, program: &dyn ProtocolProgram) {
        if let Some(s) = &self.slice {
            let (f, packets) = (s.flow, s.packets);
            let same = self.flows[f.index()]
                .queue
                .front()
                .is_some_and(|q| q.id == s.instr_id);
            if same && packets < self.quantum && self.startable(now, f) {
                self.start_packet(now, f, program);
                return;
            }
            if same && packets >= self.quantum {
                self.stats.preemptions += 1;
            }
            self.end_slice();
        }
        // Switching instruction costs a cycle that single-beat packets expose.
        if self.last_start.is_some_and(|t| now < t + 2) {
            return;
        }
        for i in 0..self.rr.len() {
            let f = self.rr[i];
            if self.startable(now, f) {
                self.rr.remove(i);
                self.flows[f.index()].in_rr = false;
                let instr_id = self.flows[f.index()].queue.front().unwrap().id;
                self.slice = Some(Slice {
                    flow: f,
                    instr_id,
                    packets: 0,
                });
                self.start_packet(now, f, program);
                return;
            }
        }
    }

    fn start_packet(&mut self, now: Cycle, f: FlowId, program: &dyn ProtocolProgram) {
        let header_bytes = self.header_bytes;
        let g = &mut self.flows[f.index()];
        let q = g.queue.front_mut().unwrap();
        let p = q.next_payload();
        let mut bytes = Vec::with_capacity(header_bytes + p as usize);
        bytes.extend_from_slice(q.header.as_bytes());
        bytes.extend(q.data.drain(..p as usize));
        let wire = bytes.len() as u64;
        match q.instr.pacing {
            Some(Pacing::Rate { .. }) => g.tokens -= wire as f64,
            Some(Pacing::Credit { .. }) => g.credit -= wire,
            None => {}
        }
        q.bytes_sent += p;
        let last = q.instr.is_header_only() || q.finished();
        if !last {
            q.header = program.header_update(&q.header, q.bytes_sent, &q.instr);
        }
        if last {
            g.queue.pop_front();
            self.stats.instructions_done += 1;
        }
        if let Some(s) = self.slice.as_mut() {
            s.packets += 1;
        }
        self.stats.packets += 1;
        self.stats.payload_bytes += p as u64;
        self.last_start = Some(now);
        let beats = (bytes.len() as u32).div_ceil(self.bus_width);
        self.tx = Some(Tx {
            packet: WirePacket {
                flow: f,
                start_cycle: now,
                end_cycle: now,
                header_len: header_bytes,
                bytes,
            },
            beats,
            sent: 0,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instr::HeaderRule;
    use crate::ple::ProgramBuilder;

    fn seq_program() -> impl ProtocolProgram {
        // Header carries a 32-bit sequence number after a 3-byte preamble.
        ProgramBuilder::new("seq", 8, 8)
            .header_rule(|h, _sent, i| {
                let mut h = h.clone();
                let s = h.get(24, 32);
                h.set(24, 32, s + i.seg_size as u64);
                h
            })
            .build()
    }

    fn run(gen: &mut PacketGenerator, mem: &SparseMemory, p: &dyn ProtocolProgram, cycles: u64) -> Vec<WirePacket> {
        (0..cycles).filter_map(|c| gen.tick(c, mem, p)).collect()
    }

    #[test]
    fn one_1500_byte_packet_takes_24_beats() {
        let mut cfg = SimConfig::default();
        cfg.pktgen.header_width = 60 * 8;
        let mut g = PacketGenerator::new(&cfg);
        let mem = SparseMemory::new();
        let p = seq_program();
        let i = PktGenInstr::new(FlowId(0), BitVector::zeros(480), 0, 1440, 1440).unwrap();
        g.enqueue(i);
        let out = run(&mut g, &mem, &p, 200);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bytes.len(), 1500);
        assert_eq!(out[0].end_cycle - out[0].start_cycle + 1, 24);
    }

    #[test]
    fn second_header_advances_by_segment() {
        let cfg = SimConfig::default();
        let mut g = PacketGenerator::new(&cfg);
        let mut mem = SparseMemory::new();
        let payload: Vec<u8> = (0..2920u32).map(|i| i as u8).collect();
        mem.write(1000, &payload);
        let p = seq_program();
        let i = PktGenInstr::new(FlowId(0), BitVector::zeros(168), 1000, 2920, 1460)
            .unwrap()
            .with_rule(HeaderRule { id: 1, params: 0 });
        g.enqueue(i);
        let out = run(&mut g, &mem, &p, 300);
        assert_eq!(out.len(), 2);
        let seq = |w: &WirePacket| BitVector::from_bytes(168, &w.bytes[..21]).get(24, 32);
        assert_eq!(seq(&out[0]), 0);
        assert_eq!(seq(&out[1]), 1460);
        let cat: Vec<u8> = out.iter().flat_map(|w| w.payload().to_vec()).collect();
        assert_eq!(cat, payload);
    }

    #[test]
    fn single_beat_packets_expose_handoff() {
        let cfg = SimConfig::default();
        let mut g = PacketGenerator::new(&cfg);
        let mem = SparseMemory::new();
        let p = seq_program();
        let mut starts = Vec::new();
        for c in 0..400 {
            for f in 0..8 {
                while g.has_room(FlowId(f)) {
                    g.enqueue(PktGenInstr::new(FlowId(f), BitVector::zeros(168), 0, 43, 43).unwrap());
                }
            }
            if let Some(w) = g.tick(c, &mem, &p) {
                starts.push(w.start_cycle);
            }
        }
        let gaps: Vec<_> = starts.windows(2).skip(20).map(|w| w[1] - w[0]).collect();
        assert!(gaps.iter().all(|&d| d == 2), "{gaps:?}");
    }

    #[test]
    fn header_only_needs_no_fetch() {
        let cfg = SimConfig::default();
        let mut g = PacketGenerator::new(&cfg);
        let mem = SparseMemory::new();
        let p = seq_program();
        g.enqueue(PktGenInstr::header_only(FlowId(2), BitVector::zeros(168)));
        let w = g.tick(0, &mem, &p).expect("single beat at cycle 0");
        assert_eq!(w.bytes.len(), 21);
        assert_eq!(g.stats().fetches, 0);
        assert!(g.is_idle());
    }

    #[test]
    fn backpressure_above_threshold() {
        let cfg = SimConfig::default();
        let mut g = PacketGenerator::new(&cfg);
        for k in 0..7 {
            assert_eq!(g.wants_backpressure(FlowId(0)), k > 6);
            g.enqueue(PktGenInstr::header_only(FlowId(0), BitVector::zeros(168)));
        }
        assert!(g.wants_backpressure(FlowId(0)));
    }
}
