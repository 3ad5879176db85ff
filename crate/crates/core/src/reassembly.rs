//! Per-flow reassembly buffers driven by add-data-seg and flush-and-notify.
//!
//! A single write port serves add-seg instructions and a single read port
//! serves flushes; each issues at most one instruction per cycle and stays
//! busy for the instruction's cycle cost. Functional effects are applied at
//! issue; notifications are released when the flush completes.

use std::collections::{BTreeSet, VecDeque};

use crate::config::{SimConfig, CHUNK_BYTES};
use crate::instr::{AddDataSeg, FlushAndNotify};
use crate::memory::{PayloadRing, SparseMemory};
use crate::types::{Cycle, FlowId};

const CHUNK: u64 = CHUNK_BYTES as u64;

/// Data made available to the application.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Notify {
    pub cycle: Cycle,
    pub flow: FlowId,
    pub app_addr: u64,
    pub bytes: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReassemblyOp {
    Add(AddDataSeg),
    Flush(FlushAndNotify),
}

/// Cycles the write port is occupied by an insertion.
pub fn add_seg_cost(dest_offset: u64, length: u32) -> u64 {
    let len = length as u64;
    if dest_offset.is_multiple_of(CHUNK) && len.is_multiple_of(CHUNK) {
        len / CHUNK
    } else {
        len.div_ceil(CHUNK) + 1
    }
}

/// Number of chunks covering `[start, start + len)`.
pub fn chunks_covering(start: u64, len: u32) -> u64 {
    (start + len as u64 - 1) / CHUNK - start / CHUNK + 1
}

/// One flow's window over its byte stream.
#[derive(Debug)]
pub struct ReassemblyBuffer {
    data: Vec<u8>,
    valid: Vec<bool>,
    read_ptr: u64,
}

impl ReassemblyBuffer {
    pub fn new(chunks: usize) -> Self {
        let n = chunks * CHUNK_BYTES;
        Self {
            data: vec![0; n],
            valid: vec![false; n],
            read_ptr: 0,
        }
    }

    pub fn span(&self) -> u64 {
        self.data.len() as u64
    }

    pub fn read_ptr(&self) -> u64 {
        self.read_ptr
    }

    fn idx(&self, off: u64) -> usize {
        (off % self.span()) as usize
    }

    /// Writes `bytes` at stream offset `dest`; later writes win.
    pub fn insert(&mut self, flow: FlowId, dest: u64, bytes: &[u8]) {
        assert!(
            dest >= self.read_ptr,
            "flow {flow}: add-seg at {dest} overlaps flushed data (read pointer {})",
            self.read_ptr
        );
        assert!(
            dest + bytes.len() as u64 <= self.read_ptr + self.span(),
            "flow {flow}: add-seg [{dest}, +{}) beyond the reassembly window",
            bytes.len()
        );
        for (i, &b) in bytes.iter().enumerate() {
            let k = self.idx(dest + i as u64);
            self.data[k] = b;
            self.valid[k] = true;
        }
    }

    /// Whether every byte of `[read_ptr, read_ptr + len)` has been written.
    pub fn contiguous(&self, len: u32) -> bool {
        (0..len as u64).all(|i| self.valid[self.idx(self.read_ptr + i)])
    }

    /// Removes `len` bytes at the read pointer.
    pub fn drain(&mut self, flow: FlowId, len: u32) -> Vec<u8> {
        let mut out = Vec::with_capacity(len as usize);
        for i in 0..len as u64 {
            let off = self.read_ptr + i;
            let k = self.idx(off);
            assert!(self.valid[k], "flow {flow}: flush of unwritten byte at offset {off}");
            out.push(self.data[k]);
            self.valid[k] = false;
        }
        self.read_ptr += len as u64;
        out
    }
}

#[derive(Debug, Default)]
struct FlowState {
    buf: Option<ReassemblyBuffer>,
    queue: VecDeque<ReassemblyOp>,
    /// Completion cycle of the latest issued add-seg.
    adds_done_at: Cycle,
}

#[derive(Debug)]
struct PendingNotify {
    done: Cycle,
    notify: Notify,
    data: Vec<u8>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReassemblyStats {
    pub segments: u64,
    pub segment_bytes: u64,
    pub write_busy_cycles: u64,
    pub flushes: u64,
    pub flushed_bytes: u64,
}

#[derive(Debug)]
pub struct Reassembly {
    flows: Vec<FlowState>,
    active: BTreeSet<u32>,
    write_free_at: Cycle,
    read_free_at: Cycle,
    write_rr: u32,
    read_rr: u32,
    pending: VecDeque<PendingNotify>,
    chunks: usize,
    depth: usize,
    bp_threshold: usize,
    stats: ReassemblyStats,
}

impl Reassembly {
    pub fn new(cfg: &SimConfig) -> Self {
        let depth = cfg.reassembly.instr_queue_depth;
        Self {
            flows: (0..cfg.global.flow_count).map(|_| FlowState::default()).collect(),
            active: BTreeSet::new(),
            write_free_at: 0,
            read_free_at: 0,
            write_rr: 0,
            read_rr: 0,
            pending: VecDeque::new(),
            chunks: cfg.reassembly.buffer_len,
            depth,
            bp_threshold: depth.saturating_sub(2),
            stats: ReassemblyStats::default(),
        }
    }

    pub fn stats(&self) -> ReassemblyStats {
        self.stats
    }

    pub fn occupancy(&self, f: FlowId) -> usize {
        self.flows[f.index()].queue.len()
    }

    pub fn has_room(&self, f: FlowId) -> bool {
        self.occupancy(f) < self.depth
    }

    pub fn wants_backpressure(&self, f: FlowId) -> bool {
        self.occupancy(f) > self.bp_threshold
    }

    pub fn is_idle(&self) -> bool {
        self.active.is_empty() && self.pending.is_empty()
    }

    pub fn buffer(&self, f: FlowId) -> Option<&ReassemblyBuffer> {
        self.flows[f.index()].buf.as_ref()
    }

    pub fn enqueue(&mut self, op: ReassemblyOp) {
        let f = match op {
            ReassemblyOp::Add(a) => a.flow,
            ReassemblyOp::Flush(x) => x.flow,
        };
        assert!(
            self.has_room(f),
            "reassembly queue of flow {f} overflowed; backpressure failed"
        );
        self.flows[f.index()].queue.push_back(op);
        self.active.insert(f.0);
    }

    /// Flows with queued work in round-robin order starting after `last`.
    fn rr_order(&self, last: u32) -> Vec<u32> {
        self.active
            .range(last + 1..)
            .chain(self.active.range(..=last))
            .copied()
            .collect()
    }

    pub fn tick(&mut self, now: Cycle, ring: &mut PayloadRing, host: &mut SparseMemory) -> Vec<Notify> {
        if now >= self.read_free_at {
            for f in self.rr_order(self.read_rr) {
                if self.try_flush(now, FlowId(f)) {
                    self.read_rr = f;
                    break;
                }
            }
        }
        if now >= self.write_free_at {
            for f in self.rr_order(self.write_rr) {
                if self.try_add(now, FlowId(f), ring) {
                    self.write_rr = f;
                    break;
                }
            }
        }
        if now < self.write_free_at {
            self.stats.write_busy_cycles += 1;
        }
        let mut out = Vec::new();
        while self.pending.front().is_some_and(|p| p.done <= now) {
            let p = self.pending.pop_front().unwrap();
            host.write(p.notify.app_addr, &p.data);
            out.push(Notify {
                cycle: now,
                ..p.notify
            });
        }
        out
    }

    fn retire_if_empty(&mut self, f: FlowId) {
        if self.flows[f.index()].queue.is_empty() {
            self.active.remove(&f.0);
        }
    }

    fn try_flush(&mut self, now: Cycle, f: FlowId) -> bool {
        let chunks = self.chunks;
        let st = &mut self.flows[f.index()];
        let Some(&ReassemblyOp::Flush(x)) = st.queue.front() else {
            return false;
        };
        if now < st.adds_done_at {
            return false;
        }
        st.queue.pop_front();
        let buf = st.buf.get_or_insert_with(|| ReassemblyBuffer::new(chunks));
        let cost = chunks_covering(buf.read_ptr(), x.length);
        let data = buf.drain(f, x.length);
        self.read_free_at = now + cost;
        self.stats.flushes += 1;
        self.stats.flushed_bytes += x.length as u64;
        self.pending.push_back(PendingNotify {
            done: now + cost,
            notify: Notify {
                cycle: now + cost,
                flow: f,
                app_addr: x.app_addr,
                bytes: x.length,
            },
            data,
        });
        self.retire_if_empty(f);
        true
    }

    fn try_add(&mut self, now: Cycle, f: FlowId, ring: &mut PayloadRing) -> bool {
        let chunks = self.chunks;
        let st = &mut self.flows[f.index()];
        let Some(&ReassemblyOp::Add(a)) = st.queue.front() else {
            return false;
        };
        st.queue.pop_front();
        let bytes = ring.read(a.src_addr, a.length as usize);
        ring.consume(a.src_addr);
        let buf = st.buf.get_or_insert_with(|| ReassemblyBuffer::new(chunks));
        buf.insert(f, a.dest_offset, &bytes);
        let cost = add_seg_cost(a.dest_offset, a.length);
        st.adds_done_at = now + cost;
        self.write_free_at = now + cost;
        self.stats.segments += 1;
        self.stats.segment_bytes += a.length as u64;
        self.retire_if_empty(f);
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_costs() {
        assert_eq!(add_seg_cost(71, 256), 5);
        assert_eq!(add_seg_cost(0, 64), 1);
        assert_eq!(add_seg_cost(0, 256), 4);
        assert_eq!(add_seg_cost(10, 100), 3);
        assert_eq!(chunks_covering(28, 100), 2);
        assert_eq!(chunks_covering(0, 128), 2);
    }

    #[test]
    fn misaligned_insert_preserves_neighbours() {
        let mut b = ReassemblyBuffer::new(8);
        b.insert(FlowId(0), 64, &[0xAA; 7]);
        b.insert(FlowId(0), 71 + 256, &[0xBB; 57]);
        b.insert(FlowId(0), 71, &[0x11; 256]);
        assert_eq!(&b.data[64..71], &[0xAA; 7]);
        assert_eq!(&b.data[71..327], &[0x11; 256][..]);
        assert_eq!(&b.data[327..384], &[0xBB; 57][..]);
    }

    #[test]
    fn out_of_order_then_flush() {
        let mut b = ReassemblyBuffer::new(256);
        let x: Vec<u8> = (0..2920u32).map(|i| (i % 251) as u8).collect();
        b.insert(FlowId(0), 1460, &x[1460..]);
        assert!(!b.contiguous(2920));
        b.insert(FlowId(0), 0, &x[..1460]);
        assert_eq!(b.drain(FlowId(0), 2920), x);
        assert_eq!(b.read_ptr(), 2920);
    }

    #[test]
    #[should_panic(expected = "flush of unwritten byte")]
    fn flush_of_hole_is_fatal() {
        let mut b = ReassemblyBuffer::new(4);
        b.insert(FlowId(3), 10, &[1; 10]);
        b.drain(FlowId(3), 20);
    }

    #[test]
    #[should_panic(expected = "overlaps flushed data")]
    fn add_below_read_ptr_is_fatal() {
        let mut b = ReassemblyBuffer::new(4);
        b.insert(FlowId(0), 0, &[1; 64]);
        b.drain(FlowId(0), 64);
        b.insert(FlowId(0), 10, &[1; 4]);
    }

    #[test]
    fn flush_waits_for_prior_add() {
        let cfg = SimConfig::default();
        let mut r = Reassembly::new(&cfg);
        let mut ring = PayloadRing::new(64);
        let mut host = SparseMemory::new();
        let head = ring.alloc(&[7; 28]).unwrap();
        let tail = ring.alloc(&[9; 100]).unwrap();
        ring.unpin(head.addr, 1);
        ring.unpin(tail.addr, 1);
        r.enqueue(ReassemblyOp::Add(AddDataSeg::new(FlowId(0), head.addr, 28, 0).unwrap()));
        r.enqueue(ReassemblyOp::Add(AddDataSeg::new(FlowId(0), tail.addr, 100, 28).unwrap()));
        r.enqueue(ReassemblyOp::Flush(FlushAndNotify::new(FlowId(0), 128, 5000).unwrap()));
        let mut notes = Vec::new();
        for c in 0..20 {
            notes.extend(r.tick(c, &mut ring, &mut host));
        }
        // Adds issue at 0 (cost 2) and 2 (cost 3); the flush issues at 5 over 2 chunks.
        assert_eq!(
            notes,
            vec![Notify {
                cycle: 7,
                flow: FlowId(0),
                app_addr: 5000,
                bytes: 128
            }]
        );
        let mut expect = vec![7u8; 28];
        expect.extend([9u8; 100]);
        assert_eq!(host.read(5000, 128), expect);
        assert_eq!(ring.used(), 0);
        assert!(r.is_idle());
    }
}
