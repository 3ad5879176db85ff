//! The protocol-agnostic transport instruction set.

use thiserror::Error;

use crate::bits::BitVector;
use crate::types::{Cycle, FlowId};

pub const MAX_SEG_SIZE: u32 = 9000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InstrError {
    #[error("packet-generation instruction with zero length")]
    ZeroLength,
    #[error("segment size {0} outside 1..=9000")]
    BadSegSize(u32),
    #[error("add-data-seg with zero length")]
    EmptySegment,
    #[error("flush-and-notify with zero length")]
    EmptyFlush,
}

/// Selects a header-update rule of the protocol program plus its parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HeaderRule {
    pub id: u8,
    pub params: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pacing {
    /// Token bucket refilled at this many bytes per cycle.
    Rate { bytes_per_cycle: f64 },
    /// Adds a byte budget to the flow when enqueued.
    Credit { bytes: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PktGenInstr {
    pub flow: FlowId,
    pub header: BitVector,
    pub data_addr: u64,
    /// Payload bytes to send; zero only for header-only instructions.
    pub total_len: u32,
    pub seg_size: u32,
    pub rule: HeaderRule,
    pub pacing: Option<Pacing>,
}

impl PktGenInstr {
    pub fn new(
        flow: FlowId,
        header: BitVector,
        data_addr: u64,
        total_len: u32,
        seg_size: u32,
    ) -> Result<Self, InstrError> {
        if total_len == 0 {
            return Err(InstrError::ZeroLength);
        }
        if seg_size == 0 || seg_size > MAX_SEG_SIZE {
            return Err(InstrError::BadSegSize(seg_size));
        }
        Ok(Self {
            flow,
            header,
            data_addr,
            total_len,
            seg_size,
            rule: HeaderRule::default(),
            pacing: None,
        })
    }

    /// A single packet carrying only `header` (e.g. a pure acknowledgement).
    pub fn header_only(flow: FlowId, header: BitVector) -> Self {
        Self {
            flow,
            header,
            data_addr: 0,
            total_len: 0,
            seg_size: 1,
            rule: HeaderRule::default(),
            pacing: None,
        }
    }

    pub fn with_rule(mut self, rule: HeaderRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn with_pacing(mut self, pacing: Pacing) -> Self {
        self.pacing = Some(pacing);
        self
    }

    pub fn is_header_only(&self) -> bool {
        self.total_len == 0
    }

    pub fn packet_count(&self) -> u32 {
        if self.is_header_only() {
            1
        } else {
            self.total_len.div_ceil(self.seg_size)
        }
    }

    /// Payload length of the packet that starts after `bytes_sent` bytes.
    pub fn next_payload_len(&self, bytes_sent: u32) -> u32 {
        self.seg_size.min(self.total_len - bytes_sent)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AddDataSeg {
    pub flow: FlowId,
    /// Address in the temporary payload ring.
    pub src_addr: u64,
    pub length: u32,
    /// Byte offset in the flow's reassembly window space.
    pub dest_offset: u64,
}

impl AddDataSeg {
    pub fn new(flow: FlowId, src_addr: u64, length: u32, dest_offset: u64) -> Result<Self, InstrError> {
        if length == 0 {
            return Err(InstrError::EmptySegment);
        }
        Ok(Self {
            flow,
            src_addr,
            length,
            dest_offset,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlushAndNotify {
    pub flow: FlowId,
    pub length: u32,
    pub app_addr: u64,
}

impl FlushAndNotify {
    pub fn new(flow: FlowId, length: u32, app_addr: u64) -> Result<Self, InstrError> {
        if length == 0 {
            return Err(InstrError::EmptyFlush);
        }
        Ok(Self {
            flow,
            length,
            app_addr,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimerOp {
    Start,
    Restart,
    Stop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimerInstr {
    pub flow: FlowId,
    pub timer_id: u8,
    pub op: TimerOp,
    pub delay: Cycle,
}

impl TimerInstr {
    pub fn start(flow: FlowId, timer_id: u8, delay: Cycle) -> Self {
        Self {
            flow,
            timer_id,
            op: TimerOp::Start,
            delay,
        }
    }

    pub fn restart(flow: FlowId, timer_id: u8, delay: Cycle) -> Self {
        Self {
            flow,
            timer_id,
            op: TimerOp::Restart,
            delay,
        }
    }

    pub fn stop(flow: FlowId, timer_id: u8) -> Self {
        Self {
            flow,
            timer_id,
            op: TimerOp::Stop,
            delay: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TransportInstruction {
    PktGen(PktGenInstr),
    AddDataSeg(AddDataSeg),
    FlushAndNotify(FlushAndNotify),
    Timer(TimerInstr),
}

impl TransportInstruction {
    pub fn flow(&self) -> FlowId {
        match self {
            Self::PktGen(i) => i.flow,
            Self::AddDataSeg(i) => i.flow,
            Self::FlushAndNotify(i) => i.flow,
            Self::Timer(i) => i.flow,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::PktGen(_) => "pktgen",
            Self::AddDataSeg(_) => "add_seg",
            Self::FlushAndNotify(_) => "flush",
            Self::Timer(_) => "timer",
        }
    }
}

impl From<PktGenInstr> for TransportInstruction {
    fn from(i: PktGenInstr) -> Self {
        Self::PktGen(i)
    }
}

impl From<AddDataSeg> for TransportInstruction {
    fn from(i: AddDataSeg) -> Self {
        Self::AddDataSeg(i)
    }
}

impl From<FlushAndNotify> for TransportInstruction {
    fn from(i: FlushAndNotify) -> Self {
        Self::FlushAndNotify(i)
    }
}

impl From<TimerInstr> for TransportInstruction {
    fn from(i: TimerInstr) -> Self {
        Self::Timer(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_length_rejected() {
        let h = BitVector::zeros(168);
        assert_eq!(
            PktGenInstr::new(FlowId(0), h.clone(), 0, 0, 1460),
            Err(InstrError::ZeroLength)
        );
        assert_eq!(
            PktGenInstr::new(FlowId(0), h, 0, 10, 9001),
            Err(InstrError::BadSegSize(9001))
        );
        assert_eq!(AddDataSeg::new(FlowId(0), 0, 0, 0), Err(InstrError::EmptySegment));
        assert_eq!(FlushAndNotify::new(FlowId(0), 0, 0), Err(InstrError::EmptyFlush));
    }

    #[test]
    fn packet_count_is_ceiling() {
        let h = BitVector::zeros(168);
        let i = PktGenInstr::new(FlowId(0), h.clone(), 0, 2921, 1460).unwrap();
        assert_eq!(i.packet_count(), 3);
        assert_eq!(i.next_payload_len(2920), 1);
        assert_eq!(PktGenInstr::header_only(FlowId(0), h).packet_count(), 1);
    }
}
