//! One transport datapath instance and the world that ticks it.
//!
//! Within a cycle the phases run in a fixed order:
//! 1. delivery, parse and event-store ingest (one event),
//! 2. scheduler dispatch into the processing engine (one event),
//! 3. pipeline retire: context writeback and event return,
//! 4. instruction delivery to the execution units,
//! 5. packet generator (one bus beat),
//! 6. reassembly ports,
//! 7. timers,
//! 8. backpressure recomputation.
//!
//! Anything produced in phase 7 is ingested no earlier than the next cycle.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::config::SimConfig;
use crate::event_sched::{BackpressureChange, EventScheduler, IngestOutcome, ReturnOutcome};
use crate::instr::TransportInstruction;
use crate::memory::{PayloadRing, SparseMemory};
use crate::pktgen::{PacketGenerator, WirePacket};
use crate::ple::{ContextTable, Pipeline, ProtocolProgram};
use crate::reassembly::{Notify, Reassembly, ReassemblyOp};
use crate::timers::Timers;
use crate::trace::Trace;
use crate::types::{Cycle, CycleClock, Event, FlowId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DatapathStats {
    pub ingested: u64,
    pub dispatched: u64,
    pub returned: u64,
    pub rx_packets: u64,
    pub parse_errors: u64,
    pub ring_drops: u64,
    pub ingest_stalls: u64,
    pub instructions: u64,
    pub expiries: u64,
}

/// Per-event scheduling record, kept when dispatch logging is enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DispatchRecord {
    pub serial: u64,
    pub flow: FlowId,
    pub ingest: Cycle,
    pub dispatch: Cycle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Timer,
    Network,
    App,
}

const SOURCES: [Source; 3] = [Source::Timer, Source::Network, Source::App];

pub struct Datapath {
    cfg: SimConfig,
    program: Arc<dyn ProtocolProgram>,
    sched: EventScheduler,
    contexts: ContextTable,
    pipeline: Pipeline,
    pktgen: PacketGenerator,
    reassembly: Reassembly,
    timers: Timers,
    host: SparseMemory,
    ring: PayloadRing,
    rx: VecDeque<Vec<u8>>,
    app: VecDeque<Event>,
    expired: VecDeque<Event>,
    ingress_next: usize,
    to_deliver: Vec<TransportInstruction>,
    backpressured: Vec<bool>,
    next_serial: u64,
    tx: Vec<WirePacket>,
    notifies: Vec<Notify>,
    dispatch_log: Option<Vec<DispatchRecord>>,
    trace: Trace,
    stats: DatapathStats,
}

impl Datapath {
    pub fn new(cfg: &SimConfig, program: Arc<dyn ProtocolProgram>) -> Self {
        let flows = cfg.global.flow_count;
        Self {
            sched: EventScheduler::new(flows, cfg.scheduler.event_buffer_depth),
            contexts: ContextTable::new(program.as_ref(), flows),
            pipeline: Pipeline::new(program.as_ref(), cfg.ple.depth_override),
            pktgen: PacketGenerator::new(cfg),
            reassembly: Reassembly::new(cfg),
            timers: Timers::new(flows, program.timers_per_flow()),
            host: SparseMemory::new(),
            ring: PayloadRing::new(cfg.reassembly.temp_ring_chunks()),
            rx: VecDeque::new(),
            app: VecDeque::new(),
            expired: VecDeque::new(),
            ingress_next: 0,
            to_deliver: Vec::new(),
            backpressured: vec![false; flows],
            next_serial: 0,
            tx: Vec::new(),
            notifies: Vec::new(),
            dispatch_log: None,
            trace: Trace::new(false),
            stats: DatapathStats::default(),
            cfg: cfg.clone(),
            program,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn program(&self) -> &dyn ProtocolProgram {
        self.program.as_ref()
    }

    pub fn set_trace(&mut self, on: bool) {
        self.trace = Trace::new(on);
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn enable_dispatch_log(&mut self) {
        self.dispatch_log = Some(Vec::new());
    }

    pub fn dispatch_log(&self) -> &[DispatchRecord] {
        self.dispatch_log.as_deref().unwrap_or(&[])
    }

    pub fn stats(&self) -> DatapathStats {
        self.stats
    }

    pub fn scheduler(&self) -> &EventScheduler {
        &self.sched
    }

    pub fn contexts(&self) -> &ContextTable {
        &self.contexts
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn pktgen(&self) -> &PacketGenerator {
        &self.pktgen
    }

    pub fn reassembly(&self) -> &Reassembly {
        &self.reassembly
    }

    pub fn timers(&self) -> &Timers {
        &self.timers
    }

    pub fn ring(&self) -> &PayloadRing {
        &self.ring
    }

    pub fn host(&self) -> &SparseMemory {
        &self.host
    }

    pub fn host_mut(&mut self) -> &mut SparseMemory {
        &mut self.host
    }

    /// Hands a received packet to the parser.
    pub fn push_rx(&mut self, packet: Vec<u8>) {
        self.rx.push_back(packet);
    }

    /// Queues an application request.
    pub fn submit(&mut self, event: Event) {
        self.app.push_back(event);
    }

    pub fn pending_app(&self) -> usize {
        self.app.len()
    }

    pub fn pending_rx(&self) -> usize {
        self.rx.len()
    }

    pub fn take_tx(&mut self) -> Vec<WirePacket> {
        std::mem::take(&mut self.tx)
    }

    pub fn take_notifies(&mut self) -> Vec<Notify> {
        std::mem::take(&mut self.notifies)
    }

    /// Nothing queued, in flight, or armed.
    pub fn is_quiescent(&self) -> bool {
        self.rx.is_empty()
            && self.app.is_empty()
            && self.expired.is_empty()
            && self.pipeline.in_flight() == 0
            && self.sched.sched.eligible_len() == 0
            && self.sched.sched.held_flows().next().is_none()
            && self.pktgen.is_idle()
            && self.reassembly.is_idle()
            && self.timers.armed() == 0
    }

    pub fn tick(&mut self, now: Cycle) {
        self.phase_ingest(now);
        self.phase_dispatch(now);
        self.phase_retire(now);
        self.phase_deliver(now);
        if let Some(w) = self.pktgen.tick(now, &self.host, self.program.as_ref()) {
            self.trace.record(now, "pktgen", "tx", Some(w.flow), || {
                format!("bytes={} start={}", w.bytes.len(), w.start_cycle)
            });
            self.tx.push(w);
        }
        for n in self.reassembly.tick(now, &mut self.ring, &mut self.host) {
            self.trace.record(now, "reasm", "notify", Some(n.flow), || {
                format!("addr={} bytes={}", n.app_addr, n.bytes)
            });
            self.notifies.push(n);
        }
        for (flow, id) in self.timers.tick(now) {
            let (t, meta) = self.program.timer_event(flow, id);
            self.trace.record(now, "timer", "expire", Some(flow), || format!("timer={id}"));
            self.stats.expiries += 1;
            self.expired.push_back(Event::new(flow, t, meta));
        }
        self.phase_backpressure(now);
    }

    fn try_ingest(&mut self, now: Cycle, mut e: Event) -> Result<(), Event> {
        let f = e.flow;
        e.arrival_cycle = now;
        e.serial = self.next_serial;
        let serial = e.serial;
        match self.sched.ingest(now, e) {
            IngestOutcome::Accepted { occupancy, placement } => {
                self.next_serial += 1;
                self.stats.ingested += 1;
                self.trace.record(now, "sched", "ingest", Some(f), || {
                    format!("serial={serial} occ={occupancy} placement={placement:?}")
                });
                Ok(())
            }
            IngestOutcome::QueueFull => unreachable!("occupancy checked before ingest"),
        }
    }

    fn has_slot(&self, f: FlowId) -> bool {
        assert!(f.index() < self.cfg.global.flow_count, "event for unknown flow {f}");
        (self.sched.store.occupancy(f) as usize) < self.sched.store.depth()
    }

    fn phase_ingest(&mut self, now: Cycle) {
        for k in 0..SOURCES.len() {
            let src = SOURCES[(self.ingress_next + k) % SOURCES.len()];
            let done = match src {
                Source::Timer | Source::App => {
                    let q = if src == Source::Timer { &self.expired } else { &self.app };
                    match q.front() {
                        Some(e) if self.has_slot(e.flow) => {
                            let e = if src == Source::Timer {
                                self.expired.pop_front()
                            } else {
                                self.app.pop_front()
                            }
                            .unwrap();
                            self.try_ingest(now, e).is_ok()
                        }
                        Some(_) => {
                            self.stats.ingest_stalls += 1;
                            false
                        }
                        None => false,
                    }
                }
                Source::Network => self.ingest_packet(now),
            };
            if done {
                self.ingress_next = (self.ingress_next + k + 1) % SOURCES.len();
                return;
            }
        }
    }

    fn ingest_packet(&mut self, now: Cycle) -> bool {
        let Some(pkt) = self.rx.front() else {
            return false;
        };
        let parsed = match self.program.parse(pkt) {
            Ok(p) => p,
            Err(err) => {
                self.stats.parse_errors += 1;
                self.trace.record(now, "parser", "error", None, || err.to_string());
                self.rx.pop_front();
                return false;
            }
        };
        if !self.has_slot(parsed.flow) {
            self.stats.ingest_stalls += 1;
            return false;
        }
        let pkt = self.rx.pop_front().unwrap();
        self.stats.rx_packets += 1;
        let mut e = Event::new(parsed.flow, parsed.event_type, parsed.metadata);
        if let Some(range) = parsed.payload.filter(|r| !r.is_empty()) {
            match self.ring.alloc(&pkt[range]) {
                Some(r) => e.payload_ref = Some(r),
                None => {
                    self.stats.ring_drops += 1;
                    self.trace.record(now, "parser", "ring_drop", Some(parsed.flow), String::new);
                    return false;
                }
            }
        }
        self.try_ingest(now, e).is_ok()
    }

    fn phase_dispatch(&mut self, now: Cycle) {
        let Some(e) = self.sched.dispatch(now) else {
            return;
        };
        self.stats.dispatched += 1;
        let f = e.flow;
        self.trace.record(now, "sched", "dispatch", Some(f), || {
            format!(
                "serial={} occ={} last={}",
                e.serial,
                self.sched.store.occupancy(f),
                e.last_event as u8
            )
        });
        if let Some(log) = self.dispatch_log.as_mut() {
            log.push(DispatchRecord {
                serial: e.serial,
                flow: f,
                ingest: e.arrival_cycle,
                dispatch: now,
            });
        }
        self.pipeline
            .accept(now, e, self.program.as_ref(), &mut self.contexts);
    }

    fn phase_retire(&mut self, now: Cycle) {
        for r in self.pipeline.retire(now, &mut self.contexts) {
            if let Some(p) = r.event.payload_ref {
                let refs = r
                    .instrs
                    .iter()
                    .filter(|i| match i {
                        TransportInstruction::AddDataSeg(a) => {
                            a.src_addr >= p.addr && a.src_addr < p.addr + p.len as u64
                        }
                        _ => false,
                    })
                    .count();
                self.ring.unpin(p.addr, refs as u32);
            }
            let f = r.event.flow;
            let out = self.sched.on_event_return(now, &r.event);
            self.stats.returned += 1;
            self.trace.record(now, "sched", "return", Some(f), || {
                format!(
                    "serial={} occ={} outcome={out:?} instrs={}",
                    r.event.serial,
                    self.sched.store.occupancy(f),
                    r.instrs.len()
                )
            });
            if matches!(out, ReturnOutcome::Requeued(_)) {
                debug_assert!(self.sched.store.occupancy(f) > 0);
            }
            self.to_deliver.extend(r.instrs);
        }
    }

    fn phase_deliver(&mut self, now: Cycle) {
        for i in std::mem::take(&mut self.to_deliver) {
            self.stats.instructions += 1;
            self.trace.record(now, "ple", "emit", Some(i.flow()), || i.kind().to_string());
            match i {
                TransportInstruction::PktGen(p) => self.pktgen.enqueue(p),
                TransportInstruction::AddDataSeg(a) => self.reassembly.enqueue(ReassemblyOp::Add(a)),
                TransportInstruction::FlushAndNotify(x) => {
                    self.reassembly.enqueue(ReassemblyOp::Flush(x))
                }
                TransportInstruction::Timer(t) => self.timers.apply(now, t),
            }
        }
    }

    fn wants_backpressure(&self, f: FlowId) -> bool {
        self.pktgen.wants_backpressure(f) || self.reassembly.wants_backpressure(f)
    }

    fn phase_backpressure(&mut self, now: Cycle) {
        let release: Vec<FlowId> = self
            .sched
            .sched
            .held_flows()
            .filter(|&f| !self.wants_backpressure(f))
            .collect();
        for f in release {
            self.set_bp(now, f, false);
        }
        for i in 0..self.backpressured.len() {
            let f = FlowId(i as u32);
            let want = self.wants_backpressure(f);
            if want != self.backpressured[i] {
                self.set_bp(now, f, want);
            }
        }
    }

    fn set_bp(&mut self, now: Cycle, f: FlowId, on: bool) {
        self.backpressured[f.index()] = on;
        let change = self.sched.set_backpressure(now, f, on);
        let verb = match change {
            BackpressureChange::Held => "hold",
            BackpressureChange::Released => "release",
            BackpressureChange::FlagOnly => {
                if on {
                    "bp_on"
                } else {
                    "bp_off"
                }
            }
            BackpressureChange::None => return,
        };
        self.trace.record(now, "sched", verb, Some(f), || {
            format!("occ={}", self.sched.store.occupancy(f))
        });
    }
}

/// Hooks through which the surrounding world feeds and drains datapaths.
pub trait Environment {
    /// Runs before any datapath ticks in cycle `now`.
    fn deliver(&mut self, now: Cycle, nodes: &mut [Datapath]);
    /// Runs after every datapath has ticked in cycle `now`.
    fn collect(&mut self, now: Cycle, nodes: &mut [Datapath]);
}

impl Environment for () {
    fn deliver(&mut self, _now: Cycle, _nodes: &mut [Datapath]) {}
    fn collect(&mut self, _now: Cycle, _nodes: &mut [Datapath]) {}
}

pub struct SimWorld<E: Environment> {
    pub clock: CycleClock,
    pub nodes: Vec<Datapath>,
    pub env: E,
}

impl<E: Environment> SimWorld<E> {
    pub fn new(nodes: Vec<Datapath>, env: E) -> Self {
        Self {
            clock: CycleClock::default(),
            nodes,
            env,
        }
    }

    pub fn now(&self) -> Cycle {
        self.clock.now()
    }

    pub fn run(&mut self, cycles: u64) {
        for _ in 0..cycles {
            tick_all(self);
        }
    }
}

/// Advances the world by exactly one cycle.
pub fn tick_all<E: Environment>(world: &mut SimWorld<E>) {
    let now = world.clock.now();
    world.env.deliver(now, &mut world.nodes);
    for n in world.nodes.iter_mut() {
        n.tick(now);
    }
    world.env.collect(now, &mut world.nodes);
    world.clock.advance();
}
