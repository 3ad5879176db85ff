//! Protocol programs and the wire conventions they share.
//!
//! Every header starts with a three-byte preamble: the destination flow
//! index (16 bits, big endian) followed by a network flag byte whose least
//! significant bit is the ECN congestion-experienced mark set by the link.
//! Both endpoints of a connection use the same flow index.

pub mod roce;
pub mod tcp;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bits::FieldWriter;
use crate::config::SimConfig;
use crate::ple::{ParseError, ProtocolProgram};
use crate::types::FlowId;

pub use roce::{RoceConfig, RoceProgram};
pub use tcp::{TcpConfig, TcpProgram};

pub const PREAMBLE_BYTES: usize = 3;
pub const PREAMBLE_BITS: usize = 24;
pub const ECN_CE: u8 = 0x01;

/// Each flow owns a 256 MiB window of host memory per direction.
pub const STREAM_SPAN: u64 = 1 << 28;
const TX_REGION: u64 = 1 << 44;
const RX_REGION: u64 = 2 << 44;

/// Host address of byte 0 of the flow's transmit stream.
pub fn tx_base(flow: FlowId) -> u64 {
    TX_REGION + flow.0 as u64 * STREAM_SPAN
}

/// Host address where the flow's received stream is delivered.
pub fn rx_base(flow: FlowId) -> u64 {
    RX_REGION + flow.0 as u64 * STREAM_SPAN
}

pub fn write_preamble(w: &mut FieldWriter<'_>, flow: FlowId) {
    w.put(16, flow.0 as u64).put(8, 0);
}

/// Flow index and ECN mark of a received packet.
pub fn read_preamble(packet: &[u8], header_bytes: usize) -> Result<(FlowId, bool), ParseError> {
    if packet.len() < header_bytes {
        return Err(ParseError::Truncated(packet.len()));
    }
    let flow = u16::from_be_bytes([packet[0], packet[1]]);
    Ok((FlowId(flow as u32), packet[2] & ECN_CE != 0))
}

/// Marks a packet as having experienced congestion.
pub fn set_ecn(packet: &mut [u8]) {
    packet[2] |= ECN_CE;
}

pub fn flow_of(packet: &[u8]) -> FlowId {
    FlowId(u16::from_be_bytes([packet[0], packet[1]]) as u32)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    #[default]
    TcpAimd,
    Rocev2Dcqcn,
}

impl ProtocolKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::TcpAimd => "tcp_aimd",
            Self::Rocev2Dcqcn => "rocev2_dcqcn",
        }
    }
}

pub fn build(
    kind: ProtocolKind,
    cfg: &SimConfig,
    tcp: &TcpConfig,
    roce: &RoceConfig,
) -> Arc<dyn ProtocolProgram> {
    match kind {
        ProtocolKind::TcpAimd => Arc::new(TcpProgram::new(cfg, tcp.clone())),
        ProtocolKind::Rocev2Dcqcn => Arc::new(RoceProgram::new(cfg, roce.clone())),
    }
}
