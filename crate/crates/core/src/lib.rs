//! Cycle-driven simulator of a protocol-independent transport datapath.
//!
//! Events from the network, the application and timers are queued per flow,
//! scheduled one per cycle into a processing engine that runs a pluggable
//! protocol program, and the resulting transport instructions drive
//! fixed-function packet generation, reassembly and timer units.

pub mod bits;
pub mod config;
pub mod datapath;
pub mod event_sched;
pub mod experiments;
pub mod harness;
pub mod instr;
pub mod memory;
pub mod pktgen;
pub mod plot;
pub mod protocols;
pub mod ple;
pub mod reassembly;
pub mod timers;
pub mod trace;
pub mod types;

pub use bits::BitVector;
pub use config::{ConfigError, SimConfig};
pub use datapath::{tick_all, Datapath, Environment, SimWorld};
pub use instr::TransportInstruction;
pub use ple::ProtocolProgram;
pub use types::{Cycle, Event, EventType, FlowContext, FlowId};
