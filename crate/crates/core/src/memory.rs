//! Byte-addressable memories used by the execution units.

use std::collections::{BTreeMap, VecDeque};

use crate::config::CHUNK_BYTES;
use crate::types::{Cycle, PayloadRef};

const PAGE: u64 = 4096;

/// Sparse, zero-initialised host memory. Holds transmit payloads and
/// receive buffers for all flows.
#[derive(Clone, Debug, Default)]
pub struct SparseMemory {
    pages: BTreeMap<u64, Box<[u8]>>,
}

impl SparseMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) {
        let mut done = 0usize;
        while done < data.len() {
            let a = addr + done as u64;
            let (page, off) = (a / PAGE, (a % PAGE) as usize);
            let n = (PAGE as usize - off).min(data.len() - done);
            let p = self
                .pages
                .entry(page)
                .or_insert_with(|| vec![0u8; PAGE as usize].into_boxed_slice());
            p[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
        }
    }

    pub fn read_into(&self, addr: u64, out: &mut [u8]) {
        let mut done = 0usize;
        while done < out.len() {
            let a = addr + done as u64;
            let (page, off) = (a / PAGE, (a % PAGE) as usize);
            let n = (PAGE as usize - off).min(out.len() - done);
            match self.pages.get(&page) {
                Some(p) => out[done..done + n].copy_from_slice(&p[off..off + n]),
                None => out[done..done + n].fill(0),
            }
            done += n;
        }
    }

    pub fn read(&self, addr: u64, len: usize) -> Vec<u8> {
        let mut v = vec![0; len];
        self.read_into(addr, &mut v);
        v
    }
}

/// Timing model of a pipelined memory port: fixed access latency and a
/// serialising bandwidth limit.
#[derive(Clone, Debug)]
pub struct MemoryPort {
    latency: Cycle,
    bandwidth: u64,
    busy_until: Cycle,
}

impl MemoryPort {
    pub fn new(latency: Cycle, bandwidth: usize) -> Self {
        assert!(bandwidth > 0);
        Self {
            latency,
            bandwidth: bandwidth as u64,
            busy_until: 0,
        }
    }

    /// Returns the cycle at which a `len`-byte request issued at `now` completes.
    pub fn issue(&mut self, now: Cycle, len: u32) -> Cycle {
        let start = (now + self.latency).max(self.busy_until);
        let done = start + (len as u64).div_ceil(self.bandwidth);
        self.busy_until = done;
        done
    }
}

#[derive(Clone, Debug)]
struct RingEntry {
    start: u64,
    alloc: u64,
    refs: u32,
    /// Still owned by an in-flight event; refs are not final yet.
    pinned: bool,
}

/// Shared ring holding received payloads until the reassembly unit consumes them.
///
/// Addresses are monotonically increasing byte offsets; storage wraps.
#[derive(Debug)]
pub struct PayloadRing {
    data: Vec<u8>,
    head: u64,
    tail: u64,
    entries: VecDeque<RingEntry>,
}

impl PayloadRing {
    pub fn new(chunks: usize) -> Self {
        Self {
            data: vec![0; chunks * CHUNK_BYTES],
            head: 0,
            tail: 0,
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.data.len() as u64
    }

    pub fn used(&self) -> u64 {
        self.tail - self.head
    }

    /// Stores `payload`; returns `None` when the ring lacks space.
    pub fn alloc(&mut self, payload: &[u8]) -> Option<PayloadRef> {
        let alloc = (payload.len() as u64).div_ceil(CHUNK_BYTES as u64).max(1) * CHUNK_BYTES as u64;
        if self.used() + alloc > self.capacity() {
            return None;
        }
        let start = self.tail;
        let cap = self.capacity();
        for (i, &b) in payload.iter().enumerate() {
            self.data[((start + i as u64) % cap) as usize] = b;
        }
        self.tail += alloc;
        self.entries.push_back(RingEntry {
            start,
            alloc,
            refs: 0,
            pinned: true,
        });
        Some(PayloadRef {
            addr: start,
            len: payload.len() as u32,
        })
    }

    pub fn read(&self, addr: u64, len: usize) -> Vec<u8> {
        assert!(
            addr >= self.head && addr + len as u64 <= self.tail,
            "payload ring read [{addr}, +{len}) outside live region [{}, {})",
            self.head,
            self.tail
        );
        let cap = self.capacity();
        (0..len as u64).map(|i| self.data[((addr + i) % cap) as usize]).collect()
    }

    fn entry_index(&self, addr: u64) -> Option<usize> {
        let i = self.entries.partition_point(|e| e.start <= addr);
        let i = i.checked_sub(1)?;
        let e = &self.entries[i];
        (addr < e.start + e.alloc).then_some(i)
    }

    /// Called when the owning event retires with `refs` add-seg instructions
    /// still to read the entry.
    pub fn unpin(&mut self, addr: u64, refs: u32) {
        let i = self.entry_index(addr).expect("unpin of unknown payload");
        let e = &mut self.entries[i];
        e.pinned = false;
        e.refs += refs;
        self.reclaim();
    }

    /// An add-seg reading from `addr` has been issued.
    pub fn consume(&mut self, addr: u64) {
        let i = self.entry_index(addr).expect("consume of unknown payload");
        let e = &mut self.entries[i];
        assert!(e.refs > 0, "payload at {addr} consumed more often than referenced");
        e.refs -= 1;
        self.reclaim();
    }

    fn reclaim(&mut self) {
        while let Some(e) = self.entries.front() {
            if e.pinned || e.refs > 0 {
                break;
            }
            self.head = e.start + e.alloc;
            self.entries.pop_front();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_memory_crosses_pages() {
        let mut m = SparseMemory::new();
        let data: Vec<u8> = (0..10_000u32).map(|i| (i * 7) as u8).collect();
        m.write(4000, &data);
        assert_eq!(m.read(4000, data.len()), data);
        assert_eq!(m.read(0, 4), vec![0; 4]);
    }

    #[test]
    fn port_serialises_bandwidth() {
        let mut p = MemoryPort::new(20, 64);
        assert_eq!(p.issue(0, 512), 28);
        assert_eq!(p.issue(1, 512), 36);
        assert_eq!(p.issue(100, 64), 121);
    }

    #[test]
    fn ring_reclaims_in_order() {
        let mut r = PayloadRing::new(4);
        let a = r.alloc(&[1; 100]).unwrap();
        let b = r.alloc(&[2; 64]).unwrap();
        assert!(r.alloc(&[3; 64]).is_some());
        assert!(r.alloc(&[4; 1]).is_none());
        r.unpin(b.addr, 0);
        assert_eq!(r.used(), 256);
        r.unpin(a.addr, 1);
        assert_eq!(r.read(a.addr, 3), vec![1, 1, 1]);
        r.consume(a.addr + 10);
        assert_eq!(r.used(), 64);
    }
}
