//! Deterministic per-cycle activity log.
//!
//! Each record serializes as one `cycle,module,verb,flow,detail` line. The
//! detail field never contains commas.

use std::fmt::Write as _;

use crate::types::{Cycle, FlowId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub cycle: Cycle,
    pub module: &'static str,
    pub verb: &'static str,
    pub flow: Option<FlowId>,
    pub detail: String,
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        let flow = self.flow.map(|f| f.to_string()).unwrap_or_else(|| "-".into());
        format!(
            "{},{},{},{},{}",
            self.cycle, self.module, self.verb, flow, self.detail
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    enabled: bool,
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            records: Vec::new(),
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    /// Records an entry; `detail` is only evaluated when tracing is on.
    pub fn record(
        &mut self,
        cycle: Cycle,
        module: &'static str,
        verb: &'static str,
        flow: Option<FlowId>,
        detail: impl FnOnce() -> String,
    ) {
        if self.enabled {
            let mut detail = detail();
            if detail.contains(',') {
                detail = detail.replace(',', ";");
            }
            self.records.push(TraceRecord {
                cycle,
                module,
                verb,
                flow,
                detail,
            });
        }
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn take(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.records)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("cycle,module,verb,flow,detail\n");
        for r in &self.records {
            let _ = writeln!(out, "{}", r.to_line());
        }
        out
    }
}
