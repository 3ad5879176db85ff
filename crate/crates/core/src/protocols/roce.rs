//! RoCEv2 reliable connection with go-back-N recovery and DCQCN rate control.
//!
//! Each flow is one queue pair and acts as both requester and responder.
//! The requester keeps posted work requests in a bounded operation list and
//! transmits them from a PSN cursor. Transmission is driven by a pump timer
//! that re-arms itself according to the current DCQCN rate, so rate changes
//! take effect within one pump interval.

use serde::{Deserialize, Serialize};

use crate::bits::{BitVector, FieldReader, FieldWriter};
use crate::config::SimConfig;
use crate::instr::{AddDataSeg, FlushAndNotify, HeaderRule, Pacing, PktGenInstr, TimerInstr, TransportInstruction};
use crate::ple::{EventTypeSpec, ParseError, ParsedPacket, ProtocolProgram};
use crate::types::{Cycle, Event, EventType, FlowContext, FlowId};

use super::{read_preamble, rx_base, write_preamble, PREAMBLE_BITS};

pub const WQE_SEND: EventType = EventType(0);
pub const WQE_WRITE: EventType = EventType(1);
pub const WQE_READ: EventType = EventType(2);
pub const DATA_FIRST: EventType = EventType(3);
pub const DATA_MIDDLE: EventType = EventType(4);
pub const DATA_LAST: EventType = EventType(5);
pub const DATA_ONLY: EventType = EventType(6);
/// ECN-marked arrivals use `DATA_* + ECN_OFFSET`.
pub const ECN_OFFSET: u8 = 4;
pub const ACK: EventType = EventType(11);
pub const NAK: EventType = EventType(12);
pub const CNP: EventType = EventType(13);
pub const ALPHA_TIMER: EventType = EventType(14);
pub const RATE_TIMER: EventType = EventType(15);
pub const RTO: EventType = EventType(16);

pub const TIMER_ALPHA: u8 = 0;
pub const TIMER_RATE: u8 = 1;
pub const TIMER_RTO: u8 = 2;
pub const TIMER_PUMP: u8 = 3;

/// InfiniBand base transport opcodes; NAK uses a code from the reserved range.
pub mod opcode {
    pub const SEND_FIRST: u8 = 0x00;
    pub const SEND_MIDDLE: u8 = 0x01;
    pub const SEND_LAST: u8 = 0x02;
    pub const SEND_ONLY: u8 = 0x04;
    pub const WRITE_FIRST: u8 = 0x06;
    pub const WRITE_MIDDLE: u8 = 0x07;
    pub const WRITE_LAST: u8 = 0x08;
    pub const WRITE_ONLY: u8 = 0x0A;
    pub const READ_REQ: u8 = 0x0C;
    pub const READ_RESP_FIRST: u8 = 0x0D;
    pub const READ_RESP_MIDDLE: u8 = 0x0E;
    pub const READ_RESP_LAST: u8 = 0x0F;
    pub const READ_RESP_ONLY: u8 = 0x10;
    pub const ACK: u8 = 0x11;
    pub const NAK: u8 = 0x1F;
    pub const CNP: u8 = 0x81;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Send,
    Write,
    Read,
}

impl OpKind {
    fn code(self) -> u64 {
        match self {
            Self::Send => 0,
            Self::Write => 1,
            Self::Read => 2,
        }
    }

    fn from_code(c: u64) -> Self {
        match c {
            0 => Self::Send,
            1 => Self::Write,
            2 => Self::Read,
            _ => panic!("corrupt operation kind {c}"),
        }
    }

    fn event_type(self) -> EventType {
        match self {
            Self::Send => WQE_SEND,
            Self::Write => WQE_WRITE,
            Self::Read => WQE_READ,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Position {
    First,
    Middle,
    Last,
    Only,
}

impl Position {
    fn of(psn: u32, first: u32, last: u32) -> Self {
        match (psn == first, psn == last) {
            (true, true) => Self::Only,
            (true, false) => Self::First,
            (false, true) => Self::Last,
            (false, false) => Self::Middle,
        }
    }

    fn ends_message(self) -> bool {
        matches!(self, Self::Last | Self::Only)
    }

    fn event_type(self, ecn: bool) -> EventType {
        let base = match self {
            Self::First => DATA_FIRST,
            Self::Middle => DATA_MIDDLE,
            Self::Last => DATA_LAST,
            Self::Only => DATA_ONLY,
        };
        EventType(base.0 + if ecn { ECN_OFFSET } else { 0 })
    }
}

/// Packet classes carrying a data position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataClass {
    Send,
    Write,
    ReadResp,
}

impl DataClass {
    pub fn opcode(self, pos: Position) -> u8 {
        use opcode::*;
        match (self, pos) {
            (Self::Send, Position::First) => SEND_FIRST,
            (Self::Send, Position::Middle) => SEND_MIDDLE,
            (Self::Send, Position::Last) => SEND_LAST,
            (Self::Send, Position::Only) => SEND_ONLY,
            (Self::Write, Position::First) => WRITE_FIRST,
            (Self::Write, Position::Middle) => WRITE_MIDDLE,
            (Self::Write, Position::Last) => WRITE_LAST,
            (Self::Write, Position::Only) => WRITE_ONLY,
            (Self::ReadResp, Position::First) => READ_RESP_FIRST,
            (Self::ReadResp, Position::Middle) => READ_RESP_MIDDLE,
            (Self::ReadResp, Position::Last) => READ_RESP_LAST,
            (Self::ReadResp, Position::Only) => READ_RESP_ONLY,
        }
    }

    pub fn decode(op: u8) -> Option<(Self, Position)> {
        use opcode::*;
        Some(match op {
            SEND_FIRST => (Self::Send, Position::First),
            SEND_MIDDLE => (Self::Send, Position::Middle),
            SEND_LAST => (Self::Send, Position::Last),
            SEND_ONLY => (Self::Send, Position::Only),
            WRITE_FIRST => (Self::Write, Position::First),
            WRITE_MIDDLE => (Self::Write, Position::Middle),
            WRITE_LAST => (Self::Write, Position::Last),
            WRITE_ONLY => (Self::Write, Position::Only),
            READ_RESP_FIRST => (Self::ReadResp, Position::First),
            READ_RESP_MIDDLE => (Self::ReadResp, Position::Middle),
            READ_RESP_LAST => (Self::ReadResp, Position::Last),
            READ_RESP_ONLY => (Self::ReadResp, Position::Only),
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoceConfig {
    /// Payload bytes per packet.
    pub mtu: u32,
    /// Outstanding work requests a queue pair can track.
    pub ops_capacity: usize,
    pub event_width: usize,
    /// Payload bytes released per pump invocation.
    pub pump_bytes: u32,
    /// Responder acknowledges at least every this many packets.
    pub ack_interval: u32,
    pub rto_cycles: u64,
    pub cnp_interval_us: f64,
    pub g: f64,
    pub initial_alpha: f64,
    /// Rate-increase steps spent in fast recovery before additive increase.
    pub fast_recovery_steps: u32,
    pub rai_mbps: f64,
    pub alpha_timer_us: f64,
    pub rate_timer_us: f64,
    pub min_rate_gbps: f64,
}

impl Default for RoceConfig {
    fn default() -> Self {
        Self {
            mtu: 1024,
            ops_capacity: 64,
            event_width: 128,
            pump_bytes: 8192,
            ack_interval: 16,
            rto_cycles: 100_000,
            cnp_interval_us: 50.0,
            g: 1.0 / 256.0,
            initial_alpha: 1.0,
            fast_recovery_steps: 5,
            rai_mbps: 40.0,
            alpha_timer_us: 55.0,
            rate_timer_us: 55.0,
            min_rate_gbps: 0.1,
        }
    }
}

/// A posted work request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Op {
    pub kind: OpKind,
    pub first_psn: u32,
    pub len: u32,
    pub local_addr: u64,
    pub remote_addr: u64,
}

const OP_BITS: usize = 2 + 32 + 32 + 48 + 48;

impl Op {
    pub fn npkts(&self, mtu: u32) -> u32 {
        self.len.div_ceil(mtu).max(1)
    }

    pub fn last_psn(&self, mtu: u32) -> u32 {
        self.first_psn + self.npkts(mtu) - 1
    }
}

/// Decoded queue-pair state.
#[derive(Clone, Debug, PartialEq)]
pub struct RoceState {
    pub sq_psn: u32,
    pub una: u32,
    pub cursor: u32,
    pub pump_active: bool,
    pub rto_active: bool,
    pub recovering: bool,
    /// Work requests accepted into the operation list.
    pub posted: u32,
    /// Completed outbound send and write requests.
    pub acked_msgs: u32,
    pub ops: Vec<Op>,
    pub rate: f64,
    pub target_rate: f64,
    pub alpha: f64,
    pub stage: u32,
    pub epsn: u32,
    pub nak_sent: bool,
    pub rx_off: u64,
    pub send_off: u64,
    pub since_ack: u32,
    /// Completed inbound messages.
    pub msn: u32,
    pub cnp_sent: bool,
    pub last_cnp: Cycle,
}

const FIXED_BITS: usize = 32 * 3 + 3 + 32 * 2 + 8 + 64 * 3 + 8 + 32 + 1 + 64 * 2 + 16 + 24 + 1 + 64;

impl RoceState {
    fn fresh(rate: f64, alpha: f64) -> Self {
        Self {
            sq_psn: 0,
            una: 0,
            cursor: 0,
            pump_active: false,
            rto_active: false,
            recovering: false,
            posted: 0,
            acked_msgs: 0,
            ops: Vec::new(),
            rate,
            target_rate: rate,
            alpha,
            stage: 0,
            epsn: 0,
            nak_sent: false,
            rx_off: 0,
            send_off: 0,
            since_ack: 0,
            msn: 0,
            cnp_sent: false,
            last_cnp: 0,
        }
    }

    fn decode(ctx: &FlowContext) -> Self {
        let mut r = FieldReader::new(&ctx.bits);
        let mut s = Self {
            sq_psn: r.take(32) as u32,
            una: r.take(32) as u32,
            cursor: r.take(32) as u32,
            pump_active: r.take_bool(),
            rto_active: r.take_bool(),
            recovering: r.take_bool(),
            posted: r.take(32) as u32,
            acked_msgs: r.take(32) as u32,
            ops: Vec::new(),
            rate: 0.0,
            target_rate: 0.0,
            alpha: 0.0,
            stage: 0,
            epsn: 0,
            nak_sent: false,
            rx_off: 0,
            send_off: 0,
            since_ack: 0,
            msn: 0,
            cnp_sent: false,
            last_cnp: 0,
        };
        let n = r.take(8) as usize;
        s.rate = f64::from_bits(r.take(64));
        s.target_rate = f64::from_bits(r.take(64));
        s.alpha = f64::from_bits(r.take(64));
        s.stage = r.take(8) as u32;
        s.epsn = r.take(32) as u32;
        s.nak_sent = r.take_bool();
        s.rx_off = r.take(64);
        s.send_off = r.take(64);
        s.since_ack = r.take(16) as u32;
        s.msn = r.take(24) as u32;
        s.cnp_sent = r.take_bool();
        s.last_cnp = r.take(64);
        debug_assert_eq!(r.position(), FIXED_BITS);
        for _ in 0..n {
            s.ops.push(Op {
                kind: OpKind::from_code(r.take(2)),
                first_psn: r.take(32) as u32,
                len: r.take(32) as u32,
                local_addr: r.take(48),
                remote_addr: r.take(48),
            });
        }
        s
    }

    fn encode(&self, width: usize) -> FlowContext {
        let mut ctx = FlowContext::zeros(width);
        let mut w = FieldWriter::new(&mut ctx.bits);
        w.put(32, self.sq_psn as u64)
            .put(32, self.una as u64)
            .put(32, self.cursor as u64)
            .put_bool(self.pump_active)
            .put_bool(self.rto_active)
            .put_bool(self.recovering)
            .put(32, self.posted as u64)
            .put(32, self.acked_msgs as u64)
            .put(8, self.ops.len() as u64)
            .put(64, self.rate.to_bits())
            .put(64, self.target_rate.to_bits())
            .put(64, self.alpha.to_bits())
            .put(8, self.stage.min(255) as u64)
            .put(32, self.epsn as u64)
            .put_bool(self.nak_sent)
            .put(64, self.rx_off)
            .put(64, self.send_off)
            .put(16, self.since_ack as u64)
            .put(24, (self.msn & 0xFF_FFFF) as u64)
            .put_bool(self.cnp_sent)
            .put(64, self.last_cnp);
        for op in &self.ops {
            w.put(2, op.kind.code())
                .put(32, op.first_psn as u64)
                .put(32, op.len as u64)
                .put(48, op.local_addr)
                .put(48, op.remote_addr);
        }
        ctx
    }
}

/// Header fields after the preamble.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoceHeader {
    pub flow: FlowId,
    pub opcode: u8,
    pub psn: u32,
    pub msn: u32,
    pub addr: u64,
    pub len: u32,
}

const OPCODE_AT: usize = PREAMBLE_BITS;
const PSN_AT: usize = OPCODE_AT + 8;
const MSN_AT: usize = PSN_AT + 32;
const ADDR_AT: usize = MSN_AT + 24;
const LEN_AT: usize = ADDR_AT + 48;
const HEADER_BITS: usize = LEN_AT + 24;

impl RoceHeader {
    pub fn to_bits(&self, width: usize) -> BitVector {
        let mut h = BitVector::zeros(width);
        let mut w = FieldWriter::new(&mut h);
        write_preamble(&mut w, self.flow);
        w.put(8, self.opcode as u64)
            .put(32, self.psn as u64)
            .put(24, (self.msn & 0xFF_FFFF) as u64)
            .put(48, self.addr)
            .put(24, self.len as u64);
        h
    }

    pub fn from_bytes(packet: &[u8], header_bytes: usize) -> Result<(Self, bool), ParseError> {
        let (flow, ecn) = read_preamble(packet, header_bytes)?;
        let bits = BitVector::from_bytes(header_bytes * 8, &packet[..header_bytes]);
        let mut r = FieldReader::at(&bits, OPCODE_AT);
        let h = Self {
            flow,
            opcode: r.take(8) as u8,
            psn: r.take(32) as u32,
            msn: r.take(24) as u32,
            addr: r.take(48),
            len: r.take(24) as u32,
        };
        Ok((h, ecn))
    }
}

// Data event metadata: opcode 8, psn 32, addr 48, len 24, msn 16.
const M_OPCODE: usize = 0;
const M_PSN: usize = 8;
const M_ADDR: usize = 40;
const M_LEN: usize = 88;
const M_MSN: usize = 112;

pub struct RoceProgram {
    cfg: RoceConfig,
    line_rate: f64,
    min_rate: f64,
    rai: f64,
    cnp_interval: Cycle,
    alpha_period: Cycle,
    rate_period: Cycle,
    header_width: usize,
    header_bytes: usize,
    context_width: usize,
    types: Vec<EventTypeSpec>,
}

impl RoceProgram {
    pub fn new(sim: &SimConfig, cfg: RoceConfig) -> Self {
        assert!(cfg.event_width >= 128, "RoCE event metadata needs 128 bits");
        assert!(sim.pktgen.header_width >= HEADER_BITS, "header too narrow for RoCE");
        assert!(
            cfg.mtu >= 1 && (cfg.mtu as usize) <= sim.pktgen.prefetch_buffer_len * crate::config::CHUNK_BYTES,
            "MTU must fit the prefetch buffer"
        );
        assert!(cfg.ops_capacity <= 255, "operation list holds at most 255 entries");
        assert!((0.0..=1.0).contains(&cfg.initial_alpha) && cfg.g > 0.0 && cfg.g < 1.0);
        let cpu = sim.cycles_per_us();
        let gbps_to_bpc = |gbps: f64| gbps * 1e9 / 8.0 / sim.global.clock_freq;
        let names = [
            ("wqe_send", 2),
            ("wqe_write", 2),
            ("wqe_read", 2),
            ("data_first", 2),
            ("data_middle", 2),
            ("data_last", 2),
            ("data_only", 2),
            ("data_first_ecn", 2),
            ("data_middle_ecn", 2),
            ("data_last_ecn", 2),
            ("data_only_ecn", 2),
            ("ack", 6),
            ("nak", 3),
            ("cnp", 2),
            ("alpha_timer", 2),
            ("rate_timer", 3),
            ("rto", 2),
        ];
        Self {
            line_rate: sim.line_rate_bytes_per_cycle(),
            min_rate: gbps_to_bpc(cfg.min_rate_gbps),
            rai: gbps_to_bpc(cfg.rai_mbps / 1000.0),
            cnp_interval: (cfg.cnp_interval_us * cpu).round() as Cycle,
            alpha_period: (cfg.alpha_timer_us * cpu).round() as Cycle,
            rate_period: (cfg.rate_timer_us * cpu).round() as Cycle,
            header_width: sim.pktgen.header_width,
            header_bytes: sim.pktgen.header_bytes(),
            context_width: FIXED_BITS + cfg.ops_capacity * OP_BITS,
            types: names
                .iter()
                .map(|&(name, depth)| EventTypeSpec { name, depth })
                .collect(),
            cfg,
        }
    }

    pub fn config(&self) -> &RoceConfig {
        &self.cfg
    }

    pub fn line_rate(&self) -> f64 {
        self.line_rate
    }

    pub fn state(&self, ctx: &FlowContext) -> RoceState {
        RoceState::decode(ctx)
    }

    pub fn encode(&self, s: &RoceState) -> FlowContext {
        s.encode(self.context_width)
    }

    /// A work request event. `remote_addr` is ignored for sends.
    pub fn wqe(&self, flow: FlowId, kind: OpKind, len: u32, local_addr: u64, remote_addr: u64) -> Event {
        assert!(len > 0, "zero-length work request");
        let mut m = BitVector::zeros(self.cfg.event_width);
        m.set(0, 32, len as u64);
        m.set(32, 48, local_addr);
        m.set(80, 48, remote_addr);
        Event::new(flow, kind.event_type(), m)
    }

    fn header(&self, h: RoceHeader) -> BitVector {
        h.to_bits(self.header_width)
    }

    fn control(&self, flow: FlowId, opcode: u8, psn: u32, msn: u32) -> TransportInstruction {
        let h = self.header(RoceHeader {
            flow,
            opcode,
            psn,
            msn,
            addr: 0,
            len: 0,
        });
        PktGenInstr::header_only(flow, h).into()
    }

    fn pacing(&self, s: &RoceState) -> Pacing {
        Pacing::Rate {
            bytes_per_cycle: s.rate,
        }
    }

    /// Packets `[first, first + n)` of a message spanning PSNs `[op_first, op_last]`.
    #[allow(clippy::too_many_arguments)]
    fn data_instr(
        &self,
        flow: FlowId,
        class: DataClass,
        psn: u32,
        op_first: u32,
        op_last: u32,
        data_addr: u64,
        len: u32,
        remote_addr: u64,
        s: &RoceState,
    ) -> TransportInstruction {
        let h = self.header(RoceHeader {
            flow,
            opcode: class.opcode(Position::of(psn, op_first, op_last)),
            psn,
            msn: 0,
            addr: remote_addr,
            len,
        });
        PktGenInstr::new(flow, h, data_addr, len, self.cfg.mtu)
            .expect("data packet has payload")
            .with_rule(HeaderRule {
                id: 1,
                params: (op_first as u64) << 32 | op_last as u64,
            })
            .with_pacing(self.pacing(s))
            .into()
    }

    fn wire_bytes(&self, payload: u32, packets: u32) -> u64 {
        payload as u64 + packets as u64 * self.header_bytes as u64
    }

    fn arm_rto(&self, f: FlowId, s: &mut RoceState, out: &mut Vec<TransportInstruction>) {
        s.rto_active = true;
        out.push(TimerInstr::restart(f, TIMER_RTO, self.cfg.rto_cycles).into());
    }

    fn op_at(&self, s: &RoceState, psn: u32) -> Option<usize> {
        let mtu = self.cfg.mtu;
        s.ops
            .iter()
            .position(|o| psn >= o.first_psn && psn <= o.last_psn(mtu))
    }

    /// Transmits from the cursor, emitting at most `max_instrs` packet instructions.
    fn pump(&self, f: FlowId, s: &mut RoceState, out: &mut Vec<TransportInstruction>, max_instrs: usize) {
        let mtu = self.cfg.mtu;
        if s.cursor >= s.sq_psn {
            s.pump_active = false;
            return;
        }
        if max_instrs == 0 {
            s.pump_active = true;
            out.push(TimerInstr::restart(f, TIMER_PUMP, 1).into());
            return;
        }
        let mut budget = self.cfg.pump_bytes.max(mtu);
        let mut wire = 0u64;
        let mut emitted = 0;
        while emitted < max_instrs && s.cursor < s.sq_psn && budget > 0 {
            let op = s.ops[self.op_at(s, s.cursor).expect("cursor inside posted operations")];
            let skip = s.cursor - op.first_psn;
            let off = skip * mtu;
            let last = op.last_psn(mtu);
            match op.kind {
                OpKind::Read => {
                    let h = self.header(RoceHeader {
                        flow: f,
                        opcode: opcode::READ_REQ,
                        psn: s.cursor,
                        msn: 0,
                        addr: op.remote_addr + off as u64,
                        len: op.len - off,
                    });
                    out.push(
                        PktGenInstr::header_only(f, h)
                            .with_pacing(self.pacing(s))
                            .into(),
                    );
                    wire += self.wire_bytes(0, 1);
                    budget = budget.saturating_sub(self.header_bytes as u32);
                    s.cursor = last + 1;
                }
                OpKind::Send | OpKind::Write => {
                    let pkts = (last + 1 - s.cursor).min((budget / mtu).max(1));
                    let len = (op.len - off).min(pkts * mtu);
                    let class = if op.kind == OpKind::Send {
                        DataClass::Send
                    } else {
                        DataClass::Write
                    };
                    out.push(self.data_instr(
                        f,
                        class,
                        s.cursor,
                        op.first_psn,
                        last,
                        op.local_addr + off as u64,
                        len,
                        op.remote_addr + off as u64,
                        s,
                    ));
                    wire += self.wire_bytes(len, pkts);
                    budget = budget.saturating_sub(len);
                    s.cursor += pkts;
                }
            }
            emitted += 1;
        }
        s.pump_active = true;
        let delay = (wire as f64 / s.rate).ceil().max(1.0) as Cycle;
        out.push(TimerInstr::restart(f, TIMER_PUMP, delay).into());
        if !s.rto_active {
            self.arm_rto(f, s, out);
        }
    }

    fn kick(&self, f: FlowId, s: &mut RoceState, out: &mut Vec<TransportInstruction>) {
        if !s.pump_active {
            let used = out.iter().filter(|i| matches!(i, TransportInstruction::PktGen(_))).count();
            self.pump(f, s, out, 2 - used);
        }
    }

    fn settle_rto(&self, f: FlowId, s: &mut RoceState, out: &mut Vec<TransportInstruction>) {
        if s.una >= s.sq_psn {
            if s.rto_active {
                s.rto_active = false;
                out.push(TimerInstr::stop(f, TIMER_RTO).into());
            }
        } else {
            self.arm_rto(f, s, out);
        }
    }

    /// Cumulatively acknowledges PSNs below `target`. Returns true when the
    /// acknowledgement skips over read responses that never arrived.
    fn ack_to(&self, s: &mut RoceState, target: u32) -> bool {
        let mtu = self.cfg.mtu;
        let target = target.min(s.sq_psn);
        let mut missing = false;
        while let Some(op) = s.ops.first().copied() {
            if target <= s.una {
                break;
            }
            if op.kind == OpKind::Read {
                missing = true;
                break;
            }
            let end = op.last_psn(mtu) + 1;
            if target >= end {
                s.ops.remove(0);
                s.una = end;
                s.acked_msgs += 1;
            } else {
                s.una = target;
                break;
            }
        }
        s.cursor = s.cursor.max(s.una);
        missing
    }

    fn go_back(&self, s: &mut RoceState) {
        s.cursor = s.una;
    }

    fn on_wqe(&self, e: &Event, s: &mut RoceState, out: &mut Vec<TransportInstruction>) {
        let kind = match e.event_type {
            WQE_SEND => OpKind::Send,
            WQE_WRITE => OpKind::Write,
            _ => OpKind::Read,
        };
        let op = Op {
            kind,
            first_psn: s.sq_psn,
            len: e.metadata.get(0, 32) as u32,
            local_addr: e.metadata.get(32, 48),
            remote_addr: e.metadata.get(80, 48),
        };
        assert!(op.len > 0, "zero-length work request");
        assert!(
            s.ops.len() < self.cfg.ops_capacity,
            "flow {}: operation list of {} entries overflowed",
            e.flow,
            self.cfg.ops_capacity
        );
        s.sq_psn += op.npkts(self.cfg.mtu);
        s.posted += 1;
        s.ops.push(op);
        self.kick(e.flow, s, out);
    }

    fn on_ack(&self, e: &Event, s: &mut RoceState, out: &mut Vec<TransportInstruction>) {
        let psn = e.metadata.get(M_PSN, 32) as u32;
        let before = s.una;
        if self.ack_to(s, psn.wrapping_add(1)) && !s.recovering {
            s.recovering = true;
            self.go_back(s);
            self.kick(e.flow, s, out);
        }
        if s.una != before {
            self.settle_rto(e.flow, s, out);
        }
    }

    fn on_nak(&self, e: &Event, s: &mut RoceState, out: &mut Vec<TransportInstruction>) {
        let psn = e.metadata.get(M_PSN, 32) as u32;
        self.ack_to(s, psn);
        self.go_back(s);
        self.kick(e.flow, s, out);
        self.settle_rto(e.flow, s, out);
    }

    fn on_timer(&self, e: &Event, s: &mut RoceState, out: &mut Vec<TransportInstruction>) {
        let f = e.flow;
        match e.metadata.get(0, 8) as u8 {
            TIMER_PUMP => {
                s.pump_active = false;
                self.pump(f, s, out, 2);
            }
            TIMER_RTO => {
                s.rto_active = false;
                if s.una < s.sq_psn {
                    s.recovering = false;
                    self.go_back(s);
                    self.kick(f, s, out);
                    self.arm_rto(f, s, out);
                }
            }
            id => panic!("unexpected RoCE timer {id}"),
        }
    }

    fn on_cnp(&self, e: &Event, s: &mut RoceState, out: &mut Vec<TransportInstruction>) {
        s.target_rate = s.rate;
        s.rate = (s.rate * (1.0 - s.alpha / 2.0)).max(self.min_rate);
        s.alpha = (1.0 - self.cfg.g) * s.alpha + self.cfg.g;
        s.stage = 0;
        out.push(TimerInstr::restart(e.flow, TIMER_ALPHA, self.alpha_period).into());
        out.push(TimerInstr::restart(e.flow, TIMER_RATE, self.rate_period).into());
    }

    fn on_alpha_timer(&self, e: &Event, s: &mut RoceState, out: &mut Vec<TransportInstruction>) {
        s.alpha *= 1.0 - self.cfg.g;
        if s.rate < self.line_rate || s.alpha > self.cfg.g {
            out.push(TimerInstr::restart(e.flow, TIMER_ALPHA, self.alpha_period).into());
        }
    }

    fn on_rate_timer(&self, e: &Event, s: &mut RoceState, out: &mut Vec<TransportInstruction>) {
        s.stage = s.stage.saturating_add(1);
        if s.stage > self.cfg.fast_recovery_steps {
            s.target_rate = (s.target_rate + self.rai).min(self.line_rate);
        }
        s.rate = ((s.target_rate + s.rate) / 2.0).min(self.line_rate);
        if s.rate < self.line_rate {
            out.push(TimerInstr::restart(e.flow, TIMER_RATE, self.rate_period).into());
        }
    }

    fn on_data(&self, e: &Event, s: &mut RoceState, out: &mut Vec<TransportInstruction>) {
        let f = e.flow;
        let ecn = e.event_type.0 >= DATA_FIRST.0 + ECN_OFFSET;
        let op = e.metadata.get(M_OPCODE, 8) as u8;
        let psn = e.metadata.get(M_PSN, 32) as u32;
        if ecn && (!s.cnp_sent || e.arrival_cycle >= s.last_cnp + self.cnp_interval) {
            s.cnp_sent = true;
            s.last_cnp = e.arrival_cycle;
            out.push(self.control(f, opcode::CNP, 0, 0));
        }
        if op == opcode::READ_REQ {
            let addr = e.metadata.get(M_ADDR, 48);
            let len = e.metadata.get(M_LEN, 24) as u32;
            self.on_read_request(f, psn, addr, len, s, out);
            return;
        }
        let (class, pos) = DataClass::decode(op).expect("parser admits data opcodes only");
        let payload = e.payload_ref.expect("data packet without payload");
        match class {
            DataClass::ReadResp => self.on_read_response(f, psn, payload, s, out),
            DataClass::Send | DataClass::Write => {
                if psn == s.epsn {
                    s.nak_sent = false;
                    s.epsn += 1;
                    let app = if class == DataClass::Send {
                        let a = rx_base(f) + s.send_off;
                        s.send_off += payload.len as u64;
                        a
                    } else {
                        e.metadata.get(M_ADDR, 48)
                    };
                    self.deliver(f, payload, app, s, out);
                    s.since_ack += 1;
                    if pos.ends_message() {
                        s.msn = s.msn.wrapping_add(1);
                    }
                    if pos.ends_message() || s.since_ack >= self.cfg.ack_interval {
                        s.since_ack = 0;
                        out.push(self.control(f, opcode::ACK, s.epsn - 1, s.msn));
                    }
                } else if psn < s.epsn {
                    out.push(self.control(f, opcode::ACK, s.epsn.wrapping_sub(1), s.msn));
                } else if !s.nak_sent {
                    s.nak_sent = true;
                    out.push(self.control(f, opcode::NAK, s.epsn, s.msn));
                }
            }
        }
    }

    fn deliver(
        &self,
        f: FlowId,
        payload: crate::types::PayloadRef,
        app_addr: u64,
        s: &mut RoceState,
        out: &mut Vec<TransportInstruction>,
    ) {
        out.push(
            AddDataSeg::new(f, payload.addr, payload.len, s.rx_off)
                .expect("non-empty payload")
                .into(),
        );
        out.push(
            FlushAndNotify::new(f, payload.len, app_addr)
                .expect("non-empty payload")
                .into(),
        );
        s.rx_off += payload.len as u64;
    }

    fn on_read_request(
        &self,
        f: FlowId,
        psn: u32,
        addr: u64,
        len: u32,
        s: &mut RoceState,
        out: &mut Vec<TransportInstruction>,
    ) {
        let npkts = len.div_ceil(self.cfg.mtu).max(1);
        if psn > s.epsn {
            if !s.nak_sent {
                s.nak_sent = true;
                out.push(self.control(f, opcode::NAK, s.epsn, s.msn));
            }
            return;
        }
        if psn == s.epsn {
            s.nak_sent = false;
            s.epsn += npkts;
            s.msn = s.msn.wrapping_add(1);
            s.since_ack = 0;
        }
        out.push(self.data_instr(
            f,
            DataClass::ReadResp,
            psn,
            psn,
            psn + npkts - 1,
            addr,
            len,
            0,
            s,
        ));
    }

    fn on_read_response(
        &self,
        f: FlowId,
        psn: u32,
        payload: crate::types::PayloadRef,
        s: &mut RoceState,
        out: &mut Vec<TransportInstruction>,
    ) {
        let mtu = self.cfg.mtu;
        let Some(k) = self.op_at(s, psn) else {
            return;
        };
        let op = s.ops[k];
        if op.kind != OpKind::Read {
            return;
        }
        let implicit = psn == op.first_psn
            && s.una < psn
            && s.ops[..k].iter().all(|o| o.kind != OpKind::Read);
        if psn == s.una || implicit {
            if implicit {
                s.acked_msgs += k as u32;
                s.ops.drain(..k);
            }
            let off = (psn - op.first_psn) * mtu;
            self.deliver(f, payload, op.local_addr + off as u64, s, out);
            s.una = psn + 1;
            s.cursor = s.cursor.max(s.una);
            s.recovering = false;
            if psn == op.last_psn(mtu) {
                s.ops.remove(0);
            }
            self.settle_rto(f, s, out);
        } else if psn > s.una && !s.recovering {
            s.recovering = true;
            self.go_back(s);
            self.kick(f, s, out);
        }
    }
}

impl ProtocolProgram for RoceProgram {
    fn name(&self) -> &str {
        "rocev2_dcqcn"
    }

    fn event_types(&self) -> &[EventTypeSpec] {
        &self.types
    }

    fn event_width(&self) -> usize {
        self.cfg.event_width
    }

    fn context_width(&self) -> usize {
        self.context_width
    }

    fn timers_per_flow(&self) -> usize {
        4
    }

    fn max_pktgen_per_event(&self) -> usize {
        2
    }

    fn init_context(&self, _flow: FlowId) -> FlowContext {
        RoceState::fresh(self.line_rate, self.cfg.initial_alpha).encode(self.context_width)
    }

    fn process(&self, event: &Event, ctx: &FlowContext) -> (FlowContext, Vec<TransportInstruction>) {
        let mut s = RoceState::decode(ctx);
        let mut out = Vec::new();
        match event.event_type {
            WQE_SEND | WQE_WRITE | WQE_READ => self.on_wqe(event, &mut s, &mut out),
            t if (DATA_FIRST.0..ACK.0).contains(&t.0) => self.on_data(event, &mut s, &mut out),
            ACK => self.on_ack(event, &mut s, &mut out),
            NAK => self.on_nak(event, &mut s, &mut out),
            CNP => self.on_cnp(event, &mut s, &mut out),
            ALPHA_TIMER => self.on_alpha_timer(event, &mut s, &mut out),
            RATE_TIMER => self.on_rate_timer(event, &mut s, &mut out),
            RTO => self.on_timer(event, &mut s, &mut out),
            t => panic!("unknown RoCE event type {}", t.0),
        }
        debug_assert!(s.rate > 0.0 && s.rate <= self.line_rate);
        debug_assert!((0.0..=1.0).contains(&s.alpha));
        (s.encode(self.context_width), out)
    }

    fn parse(&self, packet: &[u8]) -> Result<ParsedPacket, ParseError> {
        let (h, ecn) = RoceHeader::from_bytes(packet, self.header_bytes)?;
        let mut m = BitVector::zeros(self.cfg.event_width);
        m.set(M_OPCODE, 8, h.opcode as u64);
        m.set(M_PSN, 32, h.psn as u64);
        m.set(M_ADDR, 48, h.addr);
        m.set(M_LEN, 24, h.len as u64);
        m.set(M_MSN, 16, (h.msn & 0xFFFF) as u64);
        let has_payload = packet.len() > self.header_bytes;
        let (event_type, payload) = match h.opcode {
            opcode::ACK => (ACK, None),
            opcode::NAK => (NAK, None),
            opcode::CNP => (CNP, None),
            opcode::READ_REQ => (Position::Only.event_type(ecn), None),
            op => match DataClass::decode(op) {
                Some((_, pos)) => {
                    if !has_payload {
                        return Err(ParseError::Malformed("RoCE data packet without payload"));
                    }
                    (pos.event_type(ecn), Some(self.header_bytes..packet.len()))
                }
                None => return Err(ParseError::Malformed("unknown RoCE opcode")),
            },
        };
        if payload.is_none() && has_payload {
            return Err(ParseError::Malformed("RoCE control packet with payload"));
        }
        Ok(ParsedPacket {
            flow: h.flow,
            event_type,
            metadata: m,
            payload,
        })
    }

    fn header_update(&self, header: &BitVector, _bytes_sent: u32, instr: &PktGenInstr) -> BitVector {
        let mut h = header.clone();
        if instr.rule.id == 1 {
            let first = (instr.rule.params >> 32) as u32;
            let last = instr.rule.params as u32;
            let psn = header.get(PSN_AT, 32) as u32 + 1;
            let (class, _) = DataClass::decode(header.get(OPCODE_AT, 8) as u8).expect("data opcode");
            h.set(OPCODE_AT, 8, class.opcode(Position::of(psn, first, last)) as u64);
            h.set(PSN_AT, 32, psn as u64);
            h.set(ADDR_AT, 48, header.get(ADDR_AT, 48) + instr.seg_size as u64);
        }
        h
    }

    fn timer_event(&self, _flow: FlowId, timer_id: u8) -> (EventType, BitVector) {
        let mut m = BitVector::zeros(self.cfg.event_width);
        let t = match timer_id {
            TIMER_ALPHA => ALPHA_TIMER,
            TIMER_RATE => RATE_TIMER,
            TIMER_RTO | TIMER_PUMP => {
                m.set(0, 8, timer_id as u64);
                RTO
            }
            id => panic!("RoCE has no timer {id}"),
        };
        (t, m)
    }
}
