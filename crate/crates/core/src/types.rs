use std::fmt;

use crate::bits::BitVector;

pub type Cycle = u64;

#[derive(Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct FlowId(pub u32);

impl FlowId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for FlowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Protocol-defined event type index.
#[derive(Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct EventType(pub u8);

/// Location of a received payload in the temporary payload ring.
#[derive(Copy, Clone, PartialEq, Eq, Hash, Debug)]
pub struct PayloadRef {
    pub addr: u64,
    pub len: u32,
}

/// A flow-scoped unit of transport work.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Event {
    pub flow: FlowId,
    pub event_type: EventType,
    pub metadata: BitVector,
    /// Present iff the event was parsed from a data-carrying packet.
    pub payload_ref: Option<PayloadRef>,
    pub arrival_cycle: Cycle,
    /// Meaningful only once the event store has dequeued the event.
    pub last_event: bool,
    /// Datapath-assigned serial number, used for accounting and traces.
    pub serial: u64,
}

impl Event {
    pub fn new(flow: FlowId, event_type: EventType, metadata: BitVector) -> Self {
        Self {
            flow,
            event_type,
            metadata,
            payload_ref: None,
            arrival_cycle: 0,
            last_event: false,
            serial: 0,
        }
    }
}

/// Opaque per-flow protocol state; only the protocol program looks inside.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct FlowContext {
    pub bits: BitVector,
}

impl FlowContext {
    pub fn zeros(width: usize) -> Self {
        Self {
            bits: BitVector::zeros(width),
        }
    }
}

/// Global cycle counter. Every module ticked within one step sees the same `now`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CycleClock {
    now: Cycle,
}

impl CycleClock {
    pub fn now(&self) -> Cycle {
        self.now
    }

    pub fn advance(&mut self) {
        self.now += 1;
    }
}
