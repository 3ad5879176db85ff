//! Unit-level benchmarks of the scheduler, packet generator and reassembly.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bits::BitVector;
use crate::config::SimConfig;
use crate::datapath::{DispatchRecord, Datapath};
use crate::instr::{AddDataSeg, FlushAndNotify, PktGenInstr};
use crate::memory::{PayloadRing, SparseMemory};
use crate::pktgen::PacketGenerator;
use crate::ple::{ProgramBuilder, ProtocolProgram};
use crate::reassembly::{Reassembly, ReassemblyOp};
use crate::types::{Cycle, Event, EventType, FlowId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MicroConfig {
    pub sched_flows: usize,
    pub sched_buffer_depth: usize,
    /// Averaging window for throughput series, in cycles.
    pub window: u64,
    /// Throughput counted as saturated at or above this many events per cycle.
    pub saturation: f64,
    pub pktgen_flows: usize,
    pub pktgen_cycles: u64,
    pub pktgen_warmup: u64,
    pub pktgen_min_size: u32,
    pub pktgen_max_size: u32,
    pub reasm_cycles: u64,
    pub reasm_warmup: u64,
    pub reasm_base_offset: u64,
    pub seed: u64,
}

impl Default for MicroConfig {
    fn default() -> Self {
        Self {
            sched_flows: 1024,
            sched_buffer_depth: 128,
            window: 50,
            saturation: 0.95,
            pktgen_flows: 8,
            pktgen_cycles: 10_000,
            pktgen_warmup: 500,
            pktgen_min_size: 64,
            pktgen_max_size: 1500,
            reasm_cycles: 10_000,
            reasm_warmup: 500,
            reasm_base_offset: 7,
            seed: 1,
        }
    }
}

/// A program whose single event type does nothing.
pub fn null_program(depth: u32) -> Arc<dyn ProtocolProgram> {
    Arc::new(
        ProgramBuilder::new("null", 8, 8)
            .event("null", depth, |_, ctx| (ctx.clone(), Vec::new()))
            .build(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchedRun {
    pub first_ingest: Cycle,
    pub log: Vec<DispatchRecord>,
}

/// Feeds `flows` flows of `burst` back-to-back events each, flow after flow,
/// through a datapath running the null program at pipeline depth `depth`.
pub fn sched_run(micro: &MicroConfig, flows: usize, burst: usize, depth: u32) -> SchedRun {
    let (mut dp, total) = sched_datapath(micro, flows, burst, depth);
    let mut now = 0;
    while dp.stats().returned < total {
        dp.tick(now);
        now += 1;
    }
    let log = dp.dispatch_log().to_vec();
    SchedRun {
        first_ingest: log.iter().map(|r| r.ingest).min().unwrap_or(0),
        log,
    }
}

fn sched_datapath(micro: &MicroConfig, flows: usize, burst: usize, depth: u32) -> (Datapath, u64) {
    let mut sim = SimConfig::default();
    sim.global.flow_count = micro.sched_flows.max(flows);
    sim.scheduler.event_buffer_depth = micro.sched_buffer_depth.max(burst.next_power_of_two());
    sim.ple.depth_override = Some(depth);
    let mut dp = Datapath::new(&sim, null_program(depth));
    dp.enable_dispatch_log();
    for f in 0..flows as u32 {
        for _ in 0..burst {
            dp.submit(Event::new(FlowId(f), EventType(0), BitVector::zeros(8)));
        }
    }
    (dp, (flows * burst) as u64)
}

/// Trace of the first `cycles` cycles of [`sched_run`].
pub fn sched_trace(micro: &MicroConfig, flows: usize, burst: usize, depth: u32, cycles: Cycle) -> String {
    let (mut dp, _) = sched_datapath(micro, flows, burst, depth);
    dp.set_trace(true);
    for now in 0..cycles {
        dp.tick(now);
    }
    dp.trace().render()
}

impl SchedRun {
    /// Trailing-window dispatch rate, one point per cycle. The first point
    /// covers the `window` cycles following the first ingest.
    pub fn throughput(&self, window: u64) -> Vec<(Cycle, f64)> {
        let origin = self.first_ingest + 1;
        let end = self.log.iter().map(|r| r.dispatch).max().unwrap_or(origin) + 1;
        let mut per_cycle = vec![0u32; (end - origin) as usize];
        for r in &self.log {
            per_cycle[(r.dispatch - origin) as usize] += 1;
        }
        let mut out = Vec::new();
        let mut sum: u64 = 0;
        for (i, &n) in per_cycle.iter().enumerate() {
            sum += n as u64;
            if i as u64 >= window {
                sum -= per_cycle[i - window as usize] as u64;
            }
            if i as u64 + 1 >= window {
                out.push((origin + i as u64, sum as f64 / window as f64));
            }
        }
        out
    }

    /// Cycles from the first ingest to the end of the first window at or above `level`.
    pub fn time_to(&self, window: u64, level: f64) -> Option<u64> {
        self.throughput(window)
            .into_iter()
            .find(|&(_, r)| r >= level)
            .map(|(c, _)| c - self.first_ingest)
    }

    /// Scheduling delay of each event, keyed by its position in its flow's burst.
    fn delays(&self) -> Vec<(FlowId, usize, u64)> {
        let mut seen = std::collections::HashMap::new();
        let mut out: Vec<_> = self.log.clone();
        out.sort_by_key(|r| r.serial);
        out.into_iter()
            .map(|r| {
                let k = seen.entry(r.flow).or_insert(0usize);
                let pos = *k;
                *k += 1;
                (r.flow, pos, r.dispatch - r.ingest)
            })
            .collect()
    }
}

/// Per-event scheduling delay under load minus the same event's delay when
/// its flow runs alone. With identical bursts the isolated delay depends only
/// on the event's position within the burst, so one isolated run serves all flows.
pub fn load_latency(micro: &MicroConfig, flows: usize, burst: usize, depth: u32) -> Vec<i64> {
    let alone: Vec<u64> = sched_run(micro, 1, burst, depth)
        .delays()
        .into_iter()
        .map(|(_, _, d)| d)
        .collect();
    sched_run(micro, flows, burst, depth)
        .delays()
        .into_iter()
        .map(|(_, pos, d)| d as i64 - alone[pos] as i64)
        .collect()
}

/// Packet sizes for a packet-generation run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SizeMix {
    Fixed(u32),
    Uniform { min: u32, max: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Throughput {
    /// Wire bytes (header and payload) per cycle.
    pub bytes_per_cycle: f64,
    pub payload_bytes_per_cycle: f64,
    pub gbps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PktGenRun {
    pub overall: Throughput,
    /// Wire bytes per cycle in consecutive windows after warmup.
    pub series: Vec<(Cycle, f64)>,
}

/// Keeps every flow's instruction queue full of single-packet instructions of
/// `mix` sizes (wire bytes, header included) and measures the wire rate.
pub fn pktgen_run(sim: &SimConfig, micro: &MicroConfig, mix: SizeMix, series_window: u64) -> PktGenRun {
    let mut sim = sim.clone();
    sim.global.flow_count = sim.global.flow_count.max(micro.pktgen_flows);
    let header = sim.pktgen.header_bytes() as u32;
    let program = null_program(1);
    let mut gen = PacketGenerator::new(&sim);
    let mut mem = SparseMemory::new();
    let mut rng = ChaCha8Rng::seed_from_u64(micro.seed);
    let region = 1u64 << 20;
    let fill: Vec<u8> = (0..region as usize).map(|i| (i * 7 + 3) as u8).collect();
    mem.write(0, &fill);
    let mut next_addr = vec![0u64; micro.pktgen_flows];
    let start = micro.pktgen_warmup;
    let end = start + micro.pktgen_cycles;
    let (mut wire, mut payload) = (0u64, 0u64);
    let mut bins = vec![0u64; micro.pktgen_cycles.div_ceil(series_window) as usize];
    for now in 0..end {
        for f in 0..micro.pktgen_flows {
            let flow = FlowId(f as u32);
            while gen.has_room(flow) {
                let size = match mix {
                    SizeMix::Fixed(s) => s,
                    SizeMix::Uniform { min, max } => rng.gen_range(min..=max),
                };
                assert!(size > header, "packet size {size} leaves no payload");
                let len = size - header;
                let addr = f as u64 * (region / micro.pktgen_flows as u64) + next_addr[f];
                next_addr[f] = (next_addr[f] + len as u64) % (region / micro.pktgen_flows as u64 - 2048);
                let i = PktGenInstr::new(flow, BitVector::zeros(header as usize * 8), addr, len, len)
                    .expect("valid instruction");
                gen.enqueue(i);
            }
        }
        let before = gen.stats();
        let _ = gen.tick(now, &mem, program.as_ref());
        if now >= start {
            let after = gen.stats();
            let beat = after.beat_bytes - before.beat_bytes;
            wire += beat;
            payload += after.payload_bytes - before.payload_bytes;
            bins[((now - start) / series_window) as usize] += beat;
        }
    }
    let cycles = micro.pktgen_cycles as f64;
    let bpc = wire as f64 / cycles;
    PktGenRun {
        overall: Throughput {
            bytes_per_cycle: bpc,
            payload_bytes_per_cycle: payload as f64 / cycles,
            gbps: sim.bytes_per_cycle_to_gbps(bpc),
        },
        series: bins
            .into_iter()
            .enumerate()
            .map(|(i, b)| (start + i as u64 * series_window, b as f64 / series_window as f64))
            .collect(),
    }
}

/// Back-to-back single-segment insertions of `seg_size` bytes into one flow,
/// contiguous from a misaligned base offset. Each insertion is followed by a
/// flush that frees it; the write port is the measured resource.
pub fn reassembly_run(sim: &SimConfig, micro: &MicroConfig, seg_size: u32) -> Throughput {
    let flow = FlowId(0);
    let mut reasm = Reassembly::new(sim);
    let mut ring = PayloadRing::new(sim.reassembly.temp_ring_chunks());
    let mut host = SparseMemory::new();
    let base = micro.reasm_base_offset;
    let payload: Vec<u8> = (0..seg_size).map(|i| (i * 13 + 1) as u8).collect();
    let enqueue = |reasm: &mut Reassembly, ring: &mut PayloadRing, dest: u64, bytes: &[u8], flush: u32| -> bool {
        if reasm.occupancy(flow) + 2 > sim.reassembly.instr_queue_depth {
            return false;
        }
        let Some(r) = ring.alloc(bytes) else {
            return false;
        };
        ring.unpin(r.addr, 1);
        reasm.enqueue(ReassemblyOp::Add(
            AddDataSeg::new(flow, r.addr, bytes.len() as u32, dest).expect("valid segment"),
        ));
        reasm.enqueue(ReassemblyOp::Flush(
            FlushAndNotify::new(flow, flush, dest).expect("valid flush"),
        ));
        true
    };
    // The prefix below the base offset is written once so flushes stay contiguous.
    let prefix = vec![0u8; base as usize];
    let mut primed = base == 0;
    let mut next = base;
    let start = micro.reasm_warmup;
    let end = start + micro.reasm_cycles;
    let mut bytes = 0u64;
    for now in 0..end {
        if !primed {
            primed = enqueue(&mut reasm, &mut ring, 0, &prefix, base as u32);
        }
        while primed && enqueue(&mut reasm, &mut ring, next, &payload, seg_size) {
            next += seg_size as u64;
        }
        let before = reasm.stats().segment_bytes;
        reasm.tick(now, &mut ring, &mut host);
        if now >= start {
            bytes += reasm.stats().segment_bytes - before;
        }
    }
    let bpc = bytes as f64 / micro.reasm_cycles as f64;
    Throughput {
        bytes_per_cycle: bpc,
        payload_bytes_per_cycle: bpc,
        gbps: sim.bytes_per_cycle_to_gbps(bpc),
    }
}
