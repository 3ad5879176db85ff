//! Reference models shared by the oracle property tests and the acceptance run.

use std::collections::VecDeque;

use proptest::prelude::*;
use tpsim::bits::BitVector;
use tpsim::config::SimConfig;
use tpsim::event_sched::{EventScheduler, IngestOutcome};
use tpsim::harness::microbench::null_program;
use tpsim::instr::{AddDataSeg, FlushAndNotify, PktGenInstr};
use tpsim::memory::{PayloadRing, SparseMemory};
use tpsim::pktgen::PacketGenerator;
use tpsim::reassembly::{Reassembly, ReassemblyOp};
use tpsim::{Cycle, Event, EventType, FlowId};

use proptest::test_runner::TestCaseError;

/// Recomputes every flow's eligibility from scratch each step and keeps
/// eligible flows in the order they became eligible.
struct BruteScheduler {
    fifo: Vec<VecDeque<u64>>,
    in_flight: Vec<bool>,
    bp: Vec<bool>,
    order: Vec<(usize, Cycle)>,
    depth: usize,
}

impl BruteScheduler {
    fn new(flows: usize, depth: usize) -> Self {
        Self {
            fifo: vec![VecDeque::new(); flows],
            in_flight: vec![false; flows],
            bp: vec![false; flows],
            order: Vec::new(),
            depth,
        }
    }

    fn refresh(&mut self, now: Cycle) {
        for f in 0..self.fifo.len() {
            let eligible = !self.fifo[f].is_empty() && !self.in_flight[f] && !self.bp[f];
            let listed = self.order.iter().position(|&(g, _)| g == f);
            match (eligible, listed) {
                (true, None) => self.order.push((f, now)),
                (false, Some(i)) => {
                    self.order.remove(i);
                }
                _ => {}
            }
        }
    }

    fn ingest(&mut self, now: Cycle, f: usize, serial: u64) -> bool {
        if self.fifo[f].len() == self.depth {
            return false;
        }
        self.fifo[f].push_back(serial);
        self.refresh(now);
        true
    }

    fn dispatch(&mut self, now: Cycle) -> Option<(usize, u64, bool)> {
        let &(f, since) = self.order.first()?;
        if since >= now {
            return None;
        }
        let s = self.fifo[f].pop_front().unwrap();
        self.in_flight[f] = true;
        self.refresh(now);
        Some((f, s, self.fifo[f].is_empty()))
    }

    fn ret(&mut self, now: Cycle, f: usize) {
        self.in_flight[f] = false;
        self.refresh(now);
    }

    fn set_bp(&mut self, now: Cycle, f: usize, on: bool) {
        self.bp[f] = on;
        self.refresh(now);
    }
}

#[derive(Clone, Debug)]
pub struct SchedStep {
    ingest: Option<usize>,
    latency: u64,
    toggle: Option<usize>,
}

pub fn sched_workload() -> impl Strategy<Value = (usize, usize, Vec<SchedStep>)> {
    (1usize..=8, prop_oneof![Just(2usize), Just(4), Just(32)]).prop_flat_map(|(flows, depth)| {
        let step = (
            prop::option::weighted(0.8, 0..flows),
            1u64..=5,
            prop::option::weighted(0.1, 0..flows),
        )
            .prop_map(|(ingest, latency, toggle)| SchedStep { ingest, latency, toggle });
        (Just(flows), Just(depth), prop::collection::vec(step, 1..=256))
    })
}

pub fn scheduler_matches_brute_force((flows, depth, steps): (usize, usize, Vec<SchedStep>)) -> Result<(), TestCaseError> {
    let mut real = EventScheduler::new(flows, depth);
    let mut brute = BruteScheduler::new(flows, depth);
    let mut pending: Vec<(Cycle, Event)> = Vec::new();
    let mut per_flow = vec![0usize; flows];
    let mut serial = 0u64;
    let mut bp = vec![false; flows];
    let mut now: Cycle = 0;
    let mut i = 0;
    while i < steps.len() || !pending.is_empty() || real.sched.eligible_len() > 0 || bp.iter().any(|&b| b) {
        let step = steps.get(i).cloned().unwrap_or(SchedStep { ingest: None, latency: 1, toggle: None });
        i += 1;
        if let Some(f) = step.ingest.filter(|&f| per_flow[f] < 32) {
            let mut e = Event::new(FlowId(f as u32), EventType(0), BitVector::zeros(8));
            e.serial = serial;
            let accepted = matches!(real.ingest(now, e), IngestOutcome::Accepted { .. });
            prop_assert_eq!(accepted, brute.ingest(now, f, serial));
            if accepted {
                per_flow[f] += 1;
                serial += 1;
            }
        }
        let got = real.dispatch(now).map(|e| (e.flow.index(), e.serial, e.last_event));
        prop_assert_eq!(got, brute.dispatch(now), "cycle {}", now);
        if let Some((f, s, last)) = got {
            let mut e = Event::new(FlowId(f as u32), EventType(0), BitVector::zeros(8));
            e.serial = s;
            e.last_event = last;
            pending.push((now + step.latency, e));
        }
        let (due, rest): (Vec<_>, Vec<_>) = pending.into_iter().partition(|(t, _)| *t <= now);
        pending = rest;
        for (_, e) in due {
            real.on_event_return(now, &e);
            brute.ret(now, e.flow.index());
        }
        let toggle = if i > steps.len() { bp.iter().position(|&b| b) } else { step.toggle };
        if let Some(f) = toggle {
            bp[f] = !bp[f];
            real.set_backpressure(now, FlowId(f as u32), bp[f]);
            brute.set_bp(now, f, bp[f]);
        }
        real.check_invariants();
        now += 1;
    }
    prop_assert!(brute.fifo.iter().all(|q| q.is_empty()));
    prop_assert!(real.store.depth() == depth);
    Ok(())
}

#[derive(Clone, Debug)]
enum Op {
    Add { flow: usize, dest: u64, data: Vec<u8> },
    Flush { flow: usize, len: u32, app_addr: u64 },
}

const STREAM: usize = 3000;
const SPAN_CHUNKS: usize = 16;

fn app_base(flow: usize) -> u64 {
    (flow as u64 + 1) << 32
}

/// Builds an interleaved op sequence for up to four flows from random
/// segment boundaries, local reordering and overwriting duplicates, and the
/// bytes a flat array predicts each flush returns.
fn reassembly_script(seed: u64, flows: usize) -> (Vec<Op>, Vec<(usize, u64, Vec<u8>)>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let span = (SPAN_CHUNKS * 64) as u64;
    let len = rng.gen_range(1..=STREAM);
    struct S {
        segs: Vec<(u64, u64)>,
        flat: Vec<Option<u8>>,
        flushed: u64,
    }
    let mut st: Vec<S> = (0..flows)
        .map(|_| {
            let mut segs = Vec::new();
            let mut off = 0u64;
            while off < len as u64 {
                let l = rng.gen_range(1..=300u64).min(len as u64 - off);
                segs.push((off, l));
                off += l;
            }
            S { segs, flat: vec![None; len], flushed: 0 }
        })
        .collect();
    let mut ops = Vec::new();
    let mut expect = Vec::new();
    let flush = |s: &mut S, f: usize, n: u64, ops: &mut Vec<Op>, expect: &mut Vec<_>| {
        let bytes: Vec<u8> = (s.flushed..s.flushed + n).map(|o| s.flat[o as usize].unwrap()).collect();
        let app_addr = app_base(f) + s.flushed;
        ops.push(Op::Flush { flow: f, len: n as u32, app_addr });
        expect.push((f, app_addr, bytes));
        s.flushed += n;
    };
    loop {
        let live: Vec<usize> = (0..flows).filter(|&f| (st[f].flushed as usize) < len).collect();
        if live.is_empty() {
            break;
        }
        let f = live[rng.gen_range(0..live.len())];
        let s = &mut st[f];
        s.segs.retain(|&(d, l)| d + l > s.flushed);
        let ready = s.flat[s.flushed as usize..].iter().take_while(|b| b.is_some()).count() as u64;
        if ready > 0 && (s.segs.is_empty() || rng.gen_bool(0.3)) {
            let n = rng.gen_range(1..=ready);
            flush(s, f, n, &mut ops, &mut expect);
            continue;
        }
        let window = s.segs.len().min(4);
        let k = rng.gen_range(0..window);
        let (mut d, mut l) = s.segs[k];
        if d < s.flushed {
            l -= s.flushed - d;
            d = s.flushed;
        }
        if d + l > s.flushed + span {
            if ready > 0 {
                flush(s, f, ready, &mut ops, &mut expect);
            } else {
                // The head segment always fits once everything before it is flushed.
                s.segs.swap(0, k);
            }
            continue;
        }
        let data: Vec<u8> = (0..l).map(|_| rng.gen()).collect();
        for (i, &b) in data.iter().enumerate() {
            s.flat[(d + i as u64) as usize] = Some(b);
        }
        ops.push(Op::Add { flow: f, dest: d, data });
        if rng.gen_bool(0.8) {
            s.segs.remove(k);
        }
    }
    (ops, expect)
}

pub fn reassembly_matches_flat_array((seed, flows, ring_chunks): (u64, usize, usize)) -> Result<(), TestCaseError> {
    let (ops, expect) = reassembly_script(seed, flows);
    let mut sim = SimConfig::default();
    sim.global.flow_count = 4;
    sim.reassembly.buffer_len = SPAN_CHUNKS;
    sim.reassembly.temp_ring_chunks = Some(ring_chunks);
    let mut reasm = Reassembly::new(&sim);
    let mut ring = PayloadRing::new(ring_chunks);
    let mut host = SparseMemory::new();
    let mut queue: VecDeque<Op> = ops.into();
    let mut notifies = Vec::new();
    let mut now = 0;
    while !queue.is_empty() || !reasm.is_idle() || notifies.len() < expect.len() {
        while let Some(op) = queue.front() {
            let f = match op { Op::Add { flow, .. } | Op::Flush { flow, .. } => *flow };
            if !reasm.has_room(FlowId(f as u32)) {
                break;
            }
            match op {
                Op::Add { flow, dest, data } => {
                    let Some(r) = ring.alloc(data) else { break };
                    ring.unpin(r.addr, 1);
                    reasm.enqueue(ReassemblyOp::Add(
                        AddDataSeg::new(FlowId(*flow as u32), r.addr, data.len() as u32, *dest).unwrap(),
                    ));
                }
                Op::Flush { flow, len, app_addr } => {
                    reasm.enqueue(ReassemblyOp::Flush(
                        FlushAndNotify::new(FlowId(*flow as u32), *len, *app_addr).unwrap(),
                    ));
                }
            }
            queue.pop_front();
        }
        notifies.extend(reasm.tick(now, &mut ring, &mut host));
        now += 1;
        prop_assert!(now < 1_000_000, "reassembly stalled");
    }
    let mut mismatches = 0usize;
    for (f, addr, bytes) in &expect {
        let got = host.read(*addr, bytes.len());
        mismatches += got.iter().zip(bytes).filter(|(a, b)| a != b).count();
        prop_assert!(notifies.iter().any(|n| n.flow.index() == *f && n.app_addr == *addr && n.bytes as usize == bytes.len()));
    }
    prop_assert_eq!(mismatches, 0);
    prop_assert_eq!(notifies.len(), expect.len());
    for f in 0..flows {
        let mine: Vec<u64> = notifies.iter().filter(|n| n.flow.index() == f).map(|n| n.app_addr).collect();
        prop_assert!(mine.windows(2).all(|w| w[0] < w[1]), "flow {} notified out of order", f);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GenInstr {
    flow: usize,
    addr: u64,
    len: u32,
    seg: u32,
    header_only: bool,
}

pub fn reassembly_workload() -> impl Strategy<Value = (u64, usize, usize)> {
    (any::<u64>(), 1usize..=4, 5usize..=64)
}

pub fn pktgen_workload() -> impl Strategy<Value = (Vec<GenInstr>, u64)> {
    (prop::collection::vec(gen_instr(), 1..=12), any::<u64>())
}

pub fn gen_instr() -> impl Strategy<Value = GenInstr> {
    (0usize..4, 0u64..60_000, 1u32..=4000, 1u32..=1500, prop::bool::weighted(0.1)).prop_map(
        |(flow, addr, len, seg, header_only)| GenInstr { flow, addr, len, seg, header_only },
    )
}

pub fn pktgen_payload_equals_memory((instrs, seed): (Vec<GenInstr>, u64)) -> Result<(), TestCaseError> {
    use rand::{Rng, SeedableRng};
    let mut sim = SimConfig::default();
    sim.global.flow_count = 4;
    let header_bytes = sim.pktgen.header_bytes();
    let program = null_program(1);
    let mut gen = PacketGenerator::new(&sim);
    let mut mem = SparseMemory::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let image: Vec<u8> = (0..65_536).map(|_| rng.gen()).collect();
    mem.write(0, &image);

    let mut expected: Vec<Vec<(Vec<u8>, u32, bool)>> = vec![Vec::new(); 4];
    let mut backlog: Vec<VecDeque<PktGenInstr>> = vec![VecDeque::new(); 4];
    for g in &instrs {
        let flow = FlowId(g.flow as u32);
        let header = BitVector::zeros(header_bytes * 8);
        let (i, want) = if g.header_only {
            (PktGenInstr::header_only(flow, header), Vec::new())
        } else {
            let len = g.len.min(65_536 - g.addr as u32);
            (
                PktGenInstr::new(flow, header, g.addr, len, g.seg).unwrap(),
                image[g.addr as usize..g.addr as usize + len as usize].to_vec(),
            )
        };
        expected[g.flow].push((want, g.seg, g.header_only));
        backlog[g.flow].push_back(i);
    }

    let mut packets: Vec<Vec<Vec<u8>>> = vec![Vec::new(); 4];
    let mut now = 0;
    while backlog.iter().any(|b| !b.is_empty()) || !gen.is_idle() {
        for (f, b) in backlog.iter_mut().enumerate() {
            while !b.is_empty() && gen.has_room(FlowId(f as u32)) {
                gen.enqueue(b.pop_front().unwrap());
            }
        }
        if let Some(p) = gen.tick(now, &mem, program.as_ref()) {
            prop_assert_eq!(p.header_len, header_bytes);
            packets[p.flow.index()].push(p.payload().to_vec());
        }
        now += 1;
        prop_assert!(now < 1_000_000, "packet generator stalled");
    }

    for f in 0..4 {
        let mut pkts = packets[f].iter();
        for (want, seg, header_only) in &expected[f] {
            if *header_only {
                prop_assert_eq!(pkts.next().map(Vec::len), Some(0));
                continue;
            }
            let mut got = Vec::new();
            while got.len() < want.len() {
                let p = pkts.next().expect("missing packet");
                prop_assert!(p.len() as u32 <= *seg && !p.is_empty());
                got.extend_from_slice(p);
            }
            let mismatches = got.iter().zip(want).filter(|(a, b)| a != b).count();
            prop_assert_eq!(mismatches, 0);
            prop_assert_eq!(got.len(), want.len());
        }
        prop_assert!(pkts.next().is_none());
    }
    Ok(())
}
