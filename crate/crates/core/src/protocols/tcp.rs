//! TCP with AIMD congestion control and NewReno fast retransmit.
//!
//! Byte streams start at sequence number zero in both directions. The
//! receive side keeps up to [`OOO_SLOTS`] out-of-order intervals; a segment
//! that would need a fifth interval is discarded and recovered by the sender.

use serde::{Deserialize, Serialize};

use crate::bits::{BitVector, FieldReader, FieldWriter};
use crate::config::SimConfig;
use crate::instr::{AddDataSeg, FlushAndNotify, HeaderRule, PktGenInstr, TimerInstr, TransportInstruction};
use crate::ple::{EventTypeSpec, ParseError, ParsedPacket, ProtocolProgram};
use crate::types::{Event, EventType, FlowContext, FlowId};

use super::{read_preamble, rx_base, tx_base, write_preamble, PREAMBLE_BITS, PREAMBLE_BYTES};

pub const APP_SEND: EventType = EventType(0);
pub const DATA: EventType = EventType(1);
pub const ACK: EventType = EventType(2);
pub const RTO: EventType = EventType(3);

pub const KIND_DATA: u8 = 1;
pub const KIND_ACK: u8 = 2;

pub const RTO_TIMER: u8 = 0;
pub const OOO_SLOTS: usize = 4;
const SEQ_RULE: u8 = 1;
const MAX_BACKOFF: u32 = 6;

/// Bytes of TCP header on the wire, preamble included.
pub const HEADER_BYTES: usize = PREAMBLE_BYTES + 1 + 4 + 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcpConfig {
    pub mss: u32,
    /// Initial congestion window in bytes.
    pub init_cwnd: u32,
    pub init_ssthresh: u32,
    /// Peer receive window in bytes; defaults to the reassembly window.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rwnd: Option<u32>,
    pub dupack_threshold: u32,
    pub rto_cycles: u64,
    /// Doublings of the retransmission timeout after consecutive expiries.
    pub rto_backoff: bool,
}

impl Default for TcpConfig {
    fn default() -> Self {
        Self {
            mss: 1460,
            init_cwnd: 10 * 1460,
            init_ssthresh: u32::MAX,
            rwnd: None,
            dupack_threshold: 3,
            rto_cycles: 50_000,
            rto_backoff: true,
        }
    }
}

/// Decoded per-connection state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TcpState {
    pub snd_una: u32,
    pub snd_nxt: u32,
    /// One past the last byte the application has queued.
    pub app_end: u32,
    pub cwnd: u32,
    pub ssthresh: u32,
    pub dup_acks: u8,
    pub backoff: u8,
    pub recover: u32,
    pub in_recovery: bool,
    pub rto_active: bool,
    pub rcv_nxt: u32,
    /// Received byte ranges above `rcv_nxt`, sorted, non-adjacent; empty slots are `(0, 0)`.
    pub ooo: [(u32, u32); OOO_SLOTS],
}

pub const CONTEXT_BITS: usize = 32 * 7 + 8 * 2 + 2 + OOO_SLOTS * 64;

impl TcpState {
    pub fn decode(ctx: &FlowContext) -> Self {
        let mut r = FieldReader::new(&ctx.bits);
        let mut s = Self {
            snd_una: r.take(32) as u32,
            snd_nxt: r.take(32) as u32,
            app_end: r.take(32) as u32,
            cwnd: r.take(32) as u32,
            ssthresh: r.take(32) as u32,
            dup_acks: r.take(8) as u8,
            backoff: r.take(8) as u8,
            recover: r.take(32) as u32,
            in_recovery: r.take_bool(),
            rto_active: r.take_bool(),
            rcv_nxt: r.take(32) as u32,
            ooo: [(0, 0); OOO_SLOTS],
        };
        for slot in &mut s.ooo {
            *slot = (r.take(32) as u32, r.take(32) as u32);
        }
        s
    }

    pub fn encode(&self, width: usize) -> FlowContext {
        let mut ctx = FlowContext::zeros(width);
        let mut w = FieldWriter::new(&mut ctx.bits);
        w.put(32, self.snd_una as u64)
            .put(32, self.snd_nxt as u64)
            .put(32, self.app_end as u64)
            .put(32, self.cwnd as u64)
            .put(32, self.ssthresh as u64)
            .put(8, self.dup_acks as u64)
            .put(8, self.backoff as u64)
            .put(32, self.recover as u64)
            .put_bool(self.in_recovery)
            .put_bool(self.rto_active)
            .put(32, self.rcv_nxt as u64);
        for &(a, b) in &self.ooo {
            w.put(32, a as u64).put(32, b as u64);
        }
        ctx
    }

    fn intervals(&self) -> Vec<(u32, u32)> {
        self.ooo.iter().copied().filter(|(a, b)| b > a).collect()
    }

    fn set_intervals(&mut self, v: &[(u32, u32)]) {
        self.ooo = [(0, 0); OOO_SLOTS];
        self.ooo[..v.len()].copy_from_slice(v);
    }

    /// Records `[start, end)` as received. Returns false, leaving the state
    /// untouched, when the result would need more than [`OOO_SLOTS`] intervals.
    fn receive(&mut self, start: u32, end: u32) -> bool {
        let mut v = self.intervals();
        v.push((start, end));
        v.sort_unstable();
        let mut merged: Vec<(u32, u32)> = Vec::with_capacity(v.len());
        for (a, b) in v {
            match merged.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => merged.push((a, b)),
            }
        }
        if merged.first().is_some_and(|&(a, _)| a <= self.rcv_nxt) {
            let (_, b) = merged.remove(0);
            self.rcv_nxt = self.rcv_nxt.max(b);
        }
        if merged.len() > OOO_SLOTS {
            return false;
        }
        self.set_intervals(&merged);
        true
    }
}

/// Header fields after the preamble.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TcpHeader {
    pub flow: FlowId,
    pub kind: u8,
    pub seq: u32,
    pub ack: u32,
}

impl TcpHeader {
    pub fn to_bits(&self, width: usize) -> BitVector {
        let mut h = BitVector::zeros(width);
        let mut w = FieldWriter::new(&mut h);
        write_preamble(&mut w, self.flow);
        w.put(8, self.kind as u64)
            .put(32, self.seq as u64)
            .put(32, self.ack as u64);
        h
    }

    pub fn from_bytes(packet: &[u8]) -> Result<Self, ParseError> {
        let (flow, _) = read_preamble(packet, HEADER_BYTES)?;
        let bits = BitVector::from_bytes(HEADER_BYTES * 8, &packet[..HEADER_BYTES]);
        let mut r = FieldReader::at(&bits, PREAMBLE_BITS);
        Ok(Self {
            flow,
            kind: r.take(8) as u8,
            seq: r.take(32) as u32,
            ack: r.take(32) as u32,
        })
    }
}

pub struct TcpProgram {
    cfg: TcpConfig,
    rwnd: u32,
    header_width: usize,
    header_bytes: usize,
    event_width: usize,
    context_width: usize,
    types: Vec<EventTypeSpec>,
}

impl TcpProgram {
    pub fn new(sim: &SimConfig, cfg: TcpConfig) -> Self {
        assert!(
            sim.global.context_width >= CONTEXT_BITS,
            "TCP context needs {CONTEXT_BITS} bits, configured {}",
            sim.global.context_width
        );
        assert!(sim.global.event_width >= 48, "TCP event metadata needs 48 bits");
        assert!(sim.pktgen.header_bytes() >= HEADER_BYTES, "header too narrow for TCP");
        assert!(cfg.mss >= 1 && cfg.init_cwnd >= cfg.mss, "initial window below one MSS");
        let span = (sim.reassembly.buffer_len * crate::config::CHUNK_BYTES) as u32;
        Self {
            rwnd: cfg.rwnd.unwrap_or(span).min(span),
            cfg,
            header_width: sim.pktgen.header_width,
            header_bytes: sim.pktgen.header_bytes(),
            event_width: sim.global.event_width,
            context_width: sim.global.context_width,
            types: vec![
                EventTypeSpec { name: "app_send", depth: 2 },
                EventTypeSpec { name: "data", depth: 3 },
                EventTypeSpec { name: "ack", depth: 12 },
                EventTypeSpec { name: "rto", depth: 2 },
            ],
        }
    }

    pub fn config(&self) -> &TcpConfig {
        &self.cfg
    }

    /// Receive window in bytes.
    pub fn rwnd(&self) -> u32 {
        self.rwnd
    }

    /// Metadata of an application send request for `len` more bytes.
    pub fn app_send(&self, flow: FlowId, len: u32) -> Event {
        let mut m = BitVector::zeros(self.event_width);
        m.set(0, 32, len as u64);
        Event::new(flow, APP_SEND, m)
    }

    fn header(&self, flow: FlowId, kind: u8, seq: u32, ack: u32) -> BitVector {
        TcpHeader { flow, kind, seq, ack }.to_bits(self.header_width)
    }

    fn rto_delay(&self, s: &TcpState) -> u64 {
        self.cfg.rto_cycles << s.backoff
    }

    fn arm_rto(&self, flow: FlowId, s: &mut TcpState, out: &mut Vec<TransportInstruction>) {
        s.rto_active = true;
        out.push(TimerInstr::restart(flow, RTO_TIMER, self.rto_delay(s)).into());
    }

    fn segment(&self, flow: FlowId, seq: u32, len: u32) -> TransportInstruction {
        PktGenInstr::new(
            flow,
            self.header(flow, KIND_DATA, seq, 0),
            tx_base(flow) + seq as u64,
            len,
            self.cfg.mss,
        )
        .expect("segment has payload")
        .with_rule(HeaderRule { id: SEQ_RULE, params: 0 })
        .into()
    }

    /// Sends whatever the window allows beyond `snd_nxt`.
    fn send_window(&self, flow: FlowId, s: &mut TcpState, out: &mut Vec<TransportInstruction>) {
        let wnd = s.cwnd.min(self.rwnd);
        let limit = s.app_end.min(s.snd_una.saturating_add(wnd));
        if limit > s.snd_nxt {
            out.push(self.segment(flow, s.snd_nxt, limit - s.snd_nxt));
            s.snd_nxt = limit;
            if !s.rto_active {
                self.arm_rto(flow, s, out);
            }
        }
    }

    fn retransmit_head(&self, flow: FlowId, s: &TcpState, out: &mut Vec<TransportInstruction>) {
        let len = self.cfg.mss.min(s.snd_nxt - s.snd_una);
        if len > 0 {
            out.push(self.segment(flow, s.snd_una, len));
        }
    }

    fn halve(&self, s: &mut TcpState) {
        s.ssthresh = (s.cwnd / 2).max(self.cfg.mss);
    }

    fn on_app_send(&self, e: &Event, s: &mut TcpState, out: &mut Vec<TransportInstruction>) {
        let len = e.metadata.get(0, 32) as u32;
        s.app_end = s.app_end.checked_add(len).expect("TCP stream exceeds 4 GiB");
        assert!(s.app_end as u64 <= super::STREAM_SPAN, "TCP stream exceeds the flow's memory window");
        self.send_window(e.flow, s, out);
    }

    fn on_ack(&self, e: &Event, s: &mut TcpState, out: &mut Vec<TransportInstruction>) {
        let ack = e.metadata.get(0, 32) as u32;
        let f = e.flow;
        if ack > s.snd_una {
            let mss = self.cfg.mss;
            s.snd_una = ack;
            s.snd_nxt = s.snd_nxt.max(ack);
            s.dup_acks = 0;
            s.backoff = 0;
            if s.in_recovery {
                if ack >= s.recover {
                    s.in_recovery = false;
                    s.cwnd = s.ssthresh;
                } else {
                    self.retransmit_head(f, s, out);
                }
            } else if s.cwnd < s.ssthresh {
                s.cwnd = s.cwnd.saturating_add(mss);
            } else {
                let inc = ((mss as u64 * mss as u64) / s.cwnd as u64).max(1) as u32;
                s.cwnd = s.cwnd.saturating_add(inc);
            }
            if s.snd_una == s.snd_nxt {
                s.rto_active = false;
                out.push(TimerInstr::stop(f, RTO_TIMER).into());
            } else {
                self.arm_rto(f, s, out);
            }
            self.send_window(f, s, out);
        } else if ack == s.snd_una && s.snd_una < s.snd_nxt {
            s.dup_acks = s.dup_acks.saturating_add(1);
            if s.dup_acks as u32 == self.cfg.dupack_threshold && !s.in_recovery {
                self.halve(s);
                s.cwnd = s.ssthresh;
                s.recover = s.snd_nxt;
                s.in_recovery = true;
                self.retransmit_head(f, s, out);
                self.arm_rto(f, s, out);
            }
        }
    }

    fn on_rto(&self, e: &Event, s: &mut TcpState, out: &mut Vec<TransportInstruction>) {
        s.rto_active = false;
        if s.snd_una == s.snd_nxt {
            return;
        }
        self.halve(s);
        s.cwnd = self.cfg.mss;
        s.snd_nxt = s.snd_una;
        s.in_recovery = false;
        s.dup_acks = 0;
        if self.cfg.rto_backoff && (s.backoff as u32) < MAX_BACKOFF {
            s.backoff += 1;
        }
        self.send_window(e.flow, s, out);
    }

    fn on_data(&self, e: &Event, s: &mut TcpState, out: &mut Vec<TransportInstruction>) {
        let f = e.flow;
        let seq = e.metadata.get(0, 32) as u32;
        let len = e.metadata.get(32, 16) as u32;
        let payload = e.payload_ref.expect("data event without payload");
        assert_eq!(payload.len, len, "data length disagrees with payload");
        let old = s.rcv_nxt;
        let lo = seq.max(old);
        let hi = (seq + len).min(old.saturating_add(self.rwnd));
        if lo < hi && s.receive(lo, hi) {
            let add = AddDataSeg::new(f, payload.addr + (lo - seq) as u64, hi - lo, lo as u64)
                .expect("non-empty segment");
            out.push(add.into());
            if s.rcv_nxt > old {
                let flush = FlushAndNotify::new(f, s.rcv_nxt - old, rx_base(f) + old as u64)
                    .expect("non-empty flush");
                out.push(flush.into());
            }
        }
        out.push(PktGenInstr::header_only(f, self.header(f, KIND_ACK, s.snd_nxt, s.rcv_nxt)).into());
    }
}

impl ProtocolProgram for TcpProgram {
    fn name(&self) -> &str {
        "tcp_aimd"
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
        1
    }

    fn max_pktgen_per_event(&self) -> usize {
        2
    }

    fn init_context(&self, _flow: FlowId) -> FlowContext {
        TcpState {
            cwnd: self.cfg.init_cwnd,
            ssthresh: self.cfg.init_ssthresh,
            ..TcpState::default()
        }
        .encode(self.context_width)
    }

    fn process(&self, event: &Event, ctx: &FlowContext) -> (FlowContext, Vec<TransportInstruction>) {
        let mut s = TcpState::decode(ctx);
        let mut out = Vec::new();
        match event.event_type {
            APP_SEND => self.on_app_send(event, &mut s, &mut out),
            DATA => self.on_data(event, &mut s, &mut out),
            ACK => self.on_ack(event, &mut s, &mut out),
            RTO => self.on_rto(event, &mut s, &mut out),
            t => panic!("unknown TCP event type {}", t.0),
        }
        debug_assert!(s.snd_una <= s.snd_nxt && s.cwnd >= self.cfg.mss);
        (s.encode(self.context_width), out)
    }

    fn parse(&self, packet: &[u8]) -> Result<ParsedPacket, ParseError> {
        let h = TcpHeader::from_bytes(packet)?;
        let mut m = BitVector::zeros(self.event_width);
        let payload_len = packet.len() - self.header_bytes;
        match h.kind {
            KIND_DATA => {
                if payload_len == 0 {
                    return Err(ParseError::Malformed("TCP data segment without payload"));
                }
                if payload_len > u16::MAX as usize {
                    return Err(ParseError::Malformed("TCP segment too long"));
                }
                m.set(0, 32, h.seq as u64);
                m.set(32, 16, payload_len as u64);
                Ok(ParsedPacket {
                    flow: h.flow,
                    event_type: DATA,
                    metadata: m,
                    payload: Some(self.header_bytes..packet.len()),
                })
            }
            KIND_ACK => {
                m.set(0, 32, h.ack as u64);
                Ok(ParsedPacket {
                    flow: h.flow,
                    event_type: ACK,
                    metadata: m,
                    payload: None,
                })
            }
            _ => Err(ParseError::Malformed("unknown TCP segment kind")),
        }
    }

    fn header_update(&self, header: &BitVector, _bytes_sent: u32, instr: &PktGenInstr) -> BitVector {
        let mut h = header.clone();
        if instr.rule.id == SEQ_RULE {
            let off = PREAMBLE_BITS + 8;
            let seq = header.get(off, 32) as u32;
            h.set(off, 32, seq.wrapping_add(instr.seg_size) as u64);
        }
        h
    }

    fn timer_event(&self, _flow: FlowId, timer_id: u8) -> (EventType, BitVector) {
        assert_eq!(timer_id, RTO_TIMER, "TCP has a single timer");
        (RTO, BitVector::zeros(self.event_width))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::PayloadRef;

    fn prog() -> TcpProgram {
        TcpProgram::new(&SimConfig::default(), TcpConfig::default())
    }

    fn data_event(p: &TcpProgram, seq: u32, len: u32, ring_addr: u64) -> Event {
        let mut m = BitVector::zeros(p.event_width);
        m.set(0, 32, seq as u64);
        m.set(32, 16, len as u64);
        let mut e = Event::new(FlowId(0), DATA, m);
        e.payload_ref = Some(PayloadRef { addr: ring_addr, len });
        e
    }

    fn ack_event(p: &TcpProgram, ack: u32) -> Event {
        let mut m = BitVector::zeros(p.event_width);
        m.set(0, 32, ack as u64);
        Event::new(FlowId(0), ACK, m)
    }

    fn ack_of(i: &TransportInstruction) -> u32 {
        match i {
            TransportInstruction::PktGen(p) if p.is_header_only() => p.header.get(PREAMBLE_BITS + 40, 32) as u32,
            other => panic!("expected an ACK, got {other:?}"),
        }
    }

    #[test]
    fn context_fits_default_width() {
        assert!(CONTEXT_BITS <= 938);
        let s = TcpState {
            snd_una: 1,
            snd_nxt: 2,
            app_end: 3,
            cwnd: 4,
            ssthresh: 5,
            dup_acks: 6,
            backoff: 2,
            recover: 7,
            in_recovery: true,
            rto_active: true,
            rcv_nxt: 8,
            ooo: [(10, 20), (30, 40), (0, 0), (0, 0)],
        };
        assert_eq!(TcpState::decode(&s.encode(938)), s);
    }

    #[test]
    fn in_order_segment_is_added_flushed_and_acked() {
        let p = prog();
        let ctx = p.init_context(FlowId(0));
        let (ctx, out) = p.process(&data_event(&p, 0, 1460, 128), &ctx);
        assert_eq!(out.len(), 3);
        assert_eq!(
            out[0],
            AddDataSeg::new(FlowId(0), 128, 1460, 0).unwrap().into()
        );
        assert_eq!(
            out[1],
            FlushAndNotify::new(FlowId(0), 1460, rx_base(FlowId(0))).unwrap().into()
        );
        assert_eq!(ack_of(&out[2]), 1460);
        assert_eq!(TcpState::decode(&ctx).rcv_nxt, 1460);
    }

    #[test]
    fn out_of_order_segment_is_held_with_duplicate_ack() {
        let p = prog();
        let ctx = p.init_context(FlowId(0));
        let (ctx, _) = p.process(&data_event(&p, 0, 1460, 0), &ctx);
        let (ctx, out) = p.process(&data_event(&p, 2920, 1460, 1536), &ctx);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], AddDataSeg::new(FlowId(0), 1536, 1460, 2920).unwrap().into());
        assert_eq!(ack_of(&out[1]), 1460);
        let (ctx, out) = p.process(&data_event(&p, 1460, 1460, 3072), &ctx);
        assert_eq!(
            out[1],
            FlushAndNotify::new(FlowId(0), 2920, rx_base(FlowId(0)) + 1460).unwrap().into()
        );
        assert_eq!(ack_of(&out[2]), 4380);
        let s = TcpState::decode(&ctx);
        assert_eq!(s.rcv_nxt, 4380);
        assert!(s.intervals().is_empty());
    }

    #[test]
    fn duplicate_segment_only_acks() {
        let p = prog();
        let ctx = p.init_context(FlowId(0));
        let (ctx, _) = p.process(&data_event(&p, 0, 1460, 0), &ctx);
        let (_, out) = p.process(&data_event(&p, 0, 1460, 1536), &ctx);
        assert_eq!(out.len(), 1);
        assert_eq!(ack_of(&out[0]), 1460);
    }

    #[test]
    fn fifth_hole_is_dropped() {
        let p = prog();
        let mut ctx = p.init_context(FlowId(0));
        for k in 0..4u32 {
            let (c, out) = p.process(&data_event(&p, 200 + 200 * k * 2, 100, 0), &ctx);
            assert_eq!(out.len(), 2);
            ctx = c;
        }
        let (c, out) = p.process(&data_event(&p, 5000, 100, 0), &ctx);
        assert_eq!(out.len(), 1, "segment needing a fifth interval is discarded");
        assert_eq!(c, ctx);
    }

    #[test]
    fn avoidance_adds_mss_squared_over_cwnd() {
        let p = prog();
        let mss = 1460;
        let s = TcpState {
            snd_nxt: 20 * mss,
            app_end: 20 * mss,
            cwnd: 10 * mss,
            ssthresh: 5 * mss,
            rto_active: true,
            ..TcpState::default()
        };
        let (ctx, _) = p.process(&ack_event(&p, mss), &s.encode(938));
        assert_eq!(TcpState::decode(&ctx).cwnd, 10 * mss + mss / 10);
    }

    #[test]
    fn slow_start_adds_one_mss() {
        let p = prog();
        let ctx = p.process(&p.app_send(FlowId(0), 100_000), &p.init_context(FlowId(0))).0;
        let (ctx, out) = p.process(&ack_event(&p, 1460), &ctx);
        let s = TcpState::decode(&ctx);
        assert_eq!(s.cwnd, 11 * 1460);
        assert_eq!(s.snd_nxt, 1460 + 11 * 1460);
        let sent: Vec<_> = out
            .iter()
            .filter_map(|i| match i {
                TransportInstruction::PktGen(g) => Some((g.data_addr - tx_base(FlowId(0)), g.total_len)),
                _ => None,
            })
            .collect();
        assert_eq!(sent, vec![(14600, 2920)]);
    }

    #[test]
    fn app_send_is_window_limited() {
        let p = prog();
        let (ctx, out) = p.process(&p.app_send(FlowId(0), 100_000), &p.init_context(FlowId(0)));
        assert_eq!(out.len(), 2);
        match &out[0] {
            TransportInstruction::PktGen(g) => {
                assert_eq!(g.total_len, 14600);
                assert_eq!(g.seg_size, 1460);
                assert_eq!(g.data_addr, tx_base(FlowId(0)));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(out[1], TimerInstr::restart(FlowId(0), RTO_TIMER, 50_000).into());
        assert!(TcpState::decode(&ctx).rto_active);
    }

    #[test]
    fn third_duplicate_ack_retransmits_and_halves() {
        let p = prog();
        let mut ctx = p.process(&p.app_send(FlowId(0), 100_000), &p.init_context(FlowId(0))).0;
        let mut outs = Vec::new();
        for _ in 0..3 {
            let (c, out) = p.process(&ack_event(&p, 0), &ctx);
            ctx = c;
            outs.push(out);
        }
        assert!(outs[0].is_empty() && outs[1].is_empty());
        match &outs[2][0] {
            TransportInstruction::PktGen(g) => {
                assert_eq!(g.data_addr, tx_base(FlowId(0)));
                assert_eq!(g.total_len, 1460);
            }
            other => panic!("{other:?}"),
        }
        let s = TcpState::decode(&ctx);
        assert_eq!(s.ssthresh, 7300);
        assert_eq!(s.cwnd, 7300);
        assert!(s.in_recovery);
        assert_eq!(s.recover, 14600);
    }

    #[test]
    fn rto_resets_window_and_goes_back() {
        let p = prog();
        let ctx = p.process(&p.app_send(FlowId(0), 100_000), &p.init_context(FlowId(0))).0;
        let (ctx, out) = p.process(&Event::new(FlowId(0), RTO, BitVector::zeros(64)), &ctx);
        let s = TcpState::decode(&ctx);
        assert_eq!(s.cwnd, 1460);
        assert_eq!(s.snd_nxt, 1460);
        assert_eq!(s.backoff, 1);
        assert_eq!(out[1], TimerInstr::restart(FlowId(0), RTO_TIMER, 100_000).into());
    }

    #[test]
    fn header_rule_advances_sequence() {
        let p = prog();
        let ctx = p.init_context(FlowId(0));
        let (_, out) = p.process(&p.app_send(FlowId(0), 2920), &ctx);
        let TransportInstruction::PktGen(g) = &out[0] else { panic!() };
        let next = p.header_update(&g.header, 1460, g);
        assert_eq!(next.get(PREAMBLE_BITS + 8, 32), 1460);
    }

    #[test]
    fn parse_round_trip() {
        let p = prog();
        let h = TcpHeader { flow: FlowId(5), kind: KIND_DATA, seq: 77, ack: 0 }.to_bits(168);
        let mut pkt = h.as_bytes().to_vec();
        pkt.extend_from_slice(&[9; 10]);
        let parsed = p.parse(&pkt).unwrap();
        assert_eq!(parsed.flow, FlowId(5));
        assert_eq!(parsed.event_type, DATA);
        assert_eq!(parsed.metadata.get(0, 32), 77);
        assert_eq!(parsed.metadata.get(32, 16), 10);
        assert_eq!(parsed.payload, Some(21..31));
        assert!(p.parse(h.as_bytes()).is_err());
        assert!(p.parse(&pkt[..5]).is_err());
    }
}
