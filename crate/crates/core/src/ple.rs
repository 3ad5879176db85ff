//! Event-processing engine host: protocol program interface, context table
//! and the fixed-latency pipeline model.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use thiserror::Error;

use crate::bits::BitVector;
use crate::instr::{PktGenInstr, TransportInstruction};
use crate::types::{Cycle, Event, EventType, FlowContext, FlowId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventTypeSpec {
    pub name: &'static str,
    /// Cycles from dispatch to retire.
    pub depth: u32,
}

/// Result of parsing one received packet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedPacket {
    pub flow: FlowId,
    pub event_type: EventType,
    pub metadata: BitVector,
    /// Byte range of the payload inside the packet, if it carries data.
    pub payload: Option<Range<usize>>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("packet of {0} bytes is shorter than the header")]
    Truncated(usize),
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
}

/// A transport protocol expressed against the datapath.
///
/// `process` must be a pure function of its inputs; all per-flow state lives
/// in the context it receives and returns.
pub trait ProtocolProgram: Send + Sync {
    fn name(&self) -> &str;
    /// Indexed by `EventType.0`.
    fn event_types(&self) -> &[EventTypeSpec];
    fn event_width(&self) -> usize;
    fn context_width(&self) -> usize;
    fn timers_per_flow(&self) -> usize;
    /// Upper bound on packet-generation instructions emitted by one event.
    fn max_pktgen_per_event(&self) -> usize;
    /// Upper bound on reassembly instructions emitted by one event.
    fn max_reassembly_per_event(&self) -> usize {
        2
    }
    fn init_context(&self, flow: FlowId) -> FlowContext;
    fn process(&self, event: &Event, ctx: &FlowContext) -> (FlowContext, Vec<TransportInstruction>);
    fn parse(&self, packet: &[u8]) -> Result<ParsedPacket, ParseError>;
    /// Produces the header of the next packet of `instr` after `bytes_sent`
    /// payload bytes have been emitted.
    fn header_update(&self, header: &BitVector, bytes_sent: u32, instr: &PktGenInstr) -> BitVector;
    /// Event raised when timer `timer_id` of `flow` expires.
    fn timer_event(&self, flow: FlowId, timer_id: u8) -> (EventType, BitVector);
}

type ProcessFn = dyn Fn(&Event, &FlowContext) -> (FlowContext, Vec<TransportInstruction>) + Send + Sync;
type ParseFn = dyn Fn(&[u8]) -> Result<ParsedPacket, ParseError> + Send + Sync;
type HeaderFn = dyn Fn(&BitVector, u32, &PktGenInstr) -> BitVector + Send + Sync;
type TimerFn = dyn Fn(FlowId, u8) -> (EventType, BitVector) + Send + Sync;

/// Registers a program from closures, one process function per event type.
pub struct ProgramBuilder {
    name: String,
    event_width: usize,
    context_width: usize,
    timers: usize,
    max_pktgen: usize,
    types: Vec<EventTypeSpec>,
    handlers: Vec<Arc<ProcessFn>>,
    parser: Option<Arc<ParseFn>>,
    header: Option<Arc<HeaderFn>>,
    timer_event: Option<Arc<TimerFn>>,
}

impl ProgramBuilder {
    pub fn new(name: impl Into<String>, event_width: usize, context_width: usize) -> Self {
        Self {
            name: name.into(),
            event_width,
            context_width,
            timers: 0,
            max_pktgen: 2,
            types: Vec::new(),
            handlers: Vec::new(),
            parser: None,
            header: None,
            timer_event: None,
        }
    }

    pub fn event<F>(mut self, name: &'static str, depth: u32, f: F) -> Self
    where
        F: Fn(&Event, &FlowContext) -> (FlowContext, Vec<TransportInstruction>) + Send + Sync + 'static,
    {
        assert!(depth >= 1, "pipeline depth of {name} must be at least one cycle");
        self.types.push(EventTypeSpec { name, depth });
        self.handlers.push(Arc::new(f));
        self
    }

    pub fn parser<F>(mut self, f: F) -> Self
    where
        F: Fn(&[u8]) -> Result<ParsedPacket, ParseError> + Send + Sync + 'static,
    {
        self.parser = Some(Arc::new(f));
        self
    }

    pub fn header_rule<F>(mut self, f: F) -> Self
    where
        F: Fn(&BitVector, u32, &PktGenInstr) -> BitVector + Send + Sync + 'static,
    {
        self.header = Some(Arc::new(f));
        self
    }

    pub fn timers<F>(mut self, count: usize, f: F) -> Self
    where
        F: Fn(FlowId, u8) -> (EventType, BitVector) + Send + Sync + 'static,
    {
        self.timers = count;
        self.timer_event = Some(Arc::new(f));
        self
    }

    pub fn max_pktgen_per_event(mut self, n: usize) -> Self {
        self.max_pktgen = n;
        self
    }

    pub fn build(self) -> TableProgram {
        TableProgram {
            name: self.name,
            event_width: self.event_width,
            context_width: self.context_width,
            timers: self.timers,
            max_pktgen: self.max_pktgen,
            types: self.types,
            handlers: self.handlers,
            parser: self.parser,
            header: self.header,
            timer_event: self.timer_event,
        }
    }
}

/// A program assembled by [`ProgramBuilder`].
pub struct TableProgram {
    name: String,
    event_width: usize,
    context_width: usize,
    timers: usize,
    max_pktgen: usize,
    types: Vec<EventTypeSpec>,
    handlers: Vec<Arc<ProcessFn>>,
    parser: Option<Arc<ParseFn>>,
    header: Option<Arc<HeaderFn>>,
    timer_event: Option<Arc<TimerFn>>,
}

impl ProtocolProgram for TableProgram {
    fn name(&self) -> &str {
        &self.name
    }

    fn event_types(&self) -> &[EventTypeSpec] {
        &self.types
    }

    fn event_width(&self) -> usize {
        self.event_width
    }

    fn context_width(&self) -> usize {
        self.context_width
    }

    fn timers_per_flow(&self) -> usize {
        self.timers
    }

    fn max_pktgen_per_event(&self) -> usize {
        self.max_pktgen
    }

    fn init_context(&self, _flow: FlowId) -> FlowContext {
        FlowContext::zeros(self.context_width)
    }

    fn process(&self, event: &Event, ctx: &FlowContext) -> (FlowContext, Vec<TransportInstruction>) {
        let h = self
            .handlers
            .get(event.event_type.0 as usize)
            .unwrap_or_else(|| panic!("unknown event type {}", event.event_type.0));
        h(event, ctx)
    }

    fn parse(&self, packet: &[u8]) -> Result<ParsedPacket, ParseError> {
        match &self.parser {
            Some(p) => p(packet),
            None => Err(ParseError::Malformed("program has no parser")),
        }
    }

    fn header_update(&self, header: &BitVector, bytes_sent: u32, instr: &PktGenInstr) -> BitVector {
        match &self.header {
            Some(h) => h(header, bytes_sent, instr),
            None => header.clone(),
        }
    }

    fn timer_event(&self, flow: FlowId, timer_id: u8) -> (EventType, BitVector) {
        match &self.timer_event {
            Some(t) => t(flow, timer_id),
            None => panic!("program {} registers no timers", self.name),
        }
    }
}

/// Per-flow contexts behind a single read and a single write port.
#[derive(Debug)]
pub struct ContextTable {
    contexts: Vec<FlowContext>,
    last_read: Option<Cycle>,
    last_write: Option<Cycle>,
    write_conflicts: u64,
}

impl ContextTable {
    pub fn new(program: &dyn ProtocolProgram, flow_count: usize) -> Self {
        Self {
            contexts: (0..flow_count as u32)
                .map(|f| program.init_context(FlowId(f)))
                .collect(),
            last_read: None,
            last_write: None,
            write_conflicts: 0,
        }
    }

    pub fn get(&self, f: FlowId) -> &FlowContext {
        &self.contexts[f.index()]
    }

    fn read(&mut self, now: Cycle, f: FlowId) -> FlowContext {
        assert_ne!(self.last_read, Some(now), "second context read in cycle {now}");
        self.last_read = Some(now);
        self.contexts[f.index()].clone()
    }

    fn write(&mut self, now: Cycle, f: FlowId, ctx: FlowContext) {
        if self.last_write == Some(now) {
            self.write_conflicts += 1;
        }
        self.last_write = Some(now);
        self.contexts[f.index()] = ctx;
    }

    /// Cycles in which more than one writeback landed.
    pub fn write_conflicts(&self) -> u64 {
        self.write_conflicts
    }
}

#[derive(Debug)]
struct InFlight {
    event: Event,
    context: FlowContext,
    instrs: Vec<TransportInstruction>,
}

#[derive(Debug)]
pub struct Retired {
    pub event: Event,
    pub instrs: Vec<TransportInstruction>,
}

/// Fixed-latency pipeline: every output of an event lands at its completion cycle.
#[derive(Debug)]
pub struct Pipeline {
    depths: Vec<u32>,
    entries: BTreeMap<(Cycle, FlowId), InFlight>,
    max_pktgen: usize,
    max_reasm: usize,
    accepted: u64,
    retired: u64,
}

impl Pipeline {
    pub fn new(program: &dyn ProtocolProgram, depth_override: Option<u32>) -> Self {
        let depths = program
            .event_types()
            .iter()
            .map(|t| {
                let d = depth_override.unwrap_or(t.depth);
                assert!(d >= 1, "pipeline depth of {} must be at least one cycle", t.name);
                d
            })
            .collect();
        Self {
            depths,
            entries: BTreeMap::new(),
            max_pktgen: program.max_pktgen_per_event(),
            max_reasm: program.max_reassembly_per_event(),
            accepted: 0,
            retired: 0,
        }
    }

    pub fn depth(&self, t: EventType) -> u32 {
        *self
            .depths
            .get(t.0 as usize)
            .unwrap_or_else(|| panic!("unknown event type {}", t.0))
    }

    pub fn in_flight(&self) -> usize {
        self.entries.len()
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub fn retired(&self) -> u64 {
        self.retired
    }

    /// Reads the flow's context and evaluates the program; returns the completion cycle.
    pub fn accept(
        &mut self,
        now: Cycle,
        event: Event,
        program: &dyn ProtocolProgram,
        table: &mut ContextTable,
    ) -> Cycle {
        let completion = now + self.depth(event.event_type) as Cycle;
        let ctx = table.read(now, event.flow);
        let (context, instrs) = program.process(&event, &ctx);
        assert_eq!(context.bits.width(), ctx.bits.width(), "context width changed");
        let pktgens = instrs
            .iter()
            .filter(|i| matches!(i, TransportInstruction::PktGen(_)))
            .count();
        let reasm = instrs
            .iter()
            .filter(|i| {
                matches!(
                    i,
                    TransportInstruction::AddDataSeg(_) | TransportInstruction::FlushAndNotify(_)
                )
            })
            .count();
        assert!(
            pktgens <= self.max_pktgen && reasm <= self.max_reasm,
            "event type {} emitted {pktgens} pktgen and {reasm} reassembly instructions",
            event.event_type.0
        );
        for i in &instrs {
            assert_eq!(i.flow(), event.flow, "instruction targets a foreign flow");
        }
        let key = (completion, event.flow);
        let prev = self.entries.insert(
            key,
            InFlight {
                event,
                context,
                instrs,
            },
        );
        assert!(prev.is_none(), "flow {} has two events in the pipeline", key.1);
        self.accepted += 1;
        completion
    }

    /// Retires every entry due at `now` in flow-id order, writing contexts back.
    pub fn retire(&mut self, now: Cycle, table: &mut ContextTable) -> Vec<Retired> {
        let mut out = Vec::new();
        while let Some(entry) = self.entries.first_entry() {
            let (c, _) = *entry.key();
            assert!(c >= now, "pipeline entry due at {c} missed at {now}");
            if c > now {
                break;
            }
            let e = entry.remove();
            table.write(now, e.event.flow, e.context);
            self.retired += 1;
            out.push(Retired {
                event: e.event,
                instrs: e.instrs,
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instr::TimerInstr;

    fn counter_program() -> TableProgram {
        ProgramBuilder::new("counter", 8, 16)
            .event("bump", 3, |_, ctx| {
                let mut c = ctx.clone();
                let v = c.bits.get(0, 16);
                c.bits.set(0, 16, v + 1);
                (c, Vec::new())
            })
            .event("slow", 5, |e, ctx| {
                (ctx.clone(), vec![TimerInstr::start(e.flow, 0, 4).into()])
            })
            .build()
    }

    fn ev(flow: u32, t: u8) -> Event {
        Event::new(FlowId(flow), EventType(t), BitVector::zeros(8))
    }

    #[test]
    fn retire_at_dispatch_plus_depth() {
        let p = counter_program();
        let mut table = ContextTable::new(&p, 2);
        let mut pipe = Pipeline::new(&p, None);
        assert_eq!(pipe.accept(10, ev(0, 0), &p, &mut table), 13);
        for c in 11..13 {
            assert!(pipe.retire(c, &mut table).is_empty());
        }
        let r = pipe.retire(13, &mut table);
        assert_eq!(r.len(), 1);
        assert!(r[0].instrs.is_empty());
        assert_eq!(table.get(FlowId(0)).bits.get(0, 16), 1);
    }

    #[test]
    fn staggered_depths_retire_together() {
        let p = counter_program();
        let mut table = ContextTable::new(&p, 2);
        let mut pipe = Pipeline::new(&p, None);
        pipe.accept(0, ev(1, 1), &p, &mut table);
        pipe.accept(2, ev(0, 0), &p, &mut table);
        for c in 1..5 {
            assert!(pipe.retire(c, &mut table).is_empty());
        }
        let r = pipe.retire(5, &mut table);
        let flows: Vec<_> = r.iter().map(|x| x.event.flow).collect();
        assert_eq!(flows, vec![FlowId(0), FlowId(1)]);
        assert_eq!(table.write_conflicts(), 1);
    }

    #[test]
    fn override_replaces_all_depths() {
        let p = counter_program();
        let pipe = Pipeline::new(&p, Some(100));
        assert_eq!(pipe.depth(EventType(0)), 100);
        assert_eq!(pipe.depth(EventType(1)), 100);
    }

    #[test]
    #[should_panic(expected = "unknown event type")]
    fn unknown_event_type_is_fatal() {
        let p = counter_program();
        let mut table = ContextTable::new(&p, 1);
        let mut pipe = Pipeline::new(&p, None);
        pipe.accept(0, ev(0, 9), &p, &mut table);
    }
}
