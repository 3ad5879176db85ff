//! Per-flow one-shot timers.

use std::collections::BTreeSet;

use crate::instr::{TimerInstr, TimerOp};
use crate::types::{Cycle, FlowId};

#[derive(Debug)]
pub struct Timers {
    per_flow: usize,
    slots: Vec<Option<Cycle>>,
    due: BTreeSet<(Cycle, u32, u8)>,
}

impl Timers {
    pub fn new(flow_count: usize, per_flow: usize) -> Self {
        Self {
            per_flow,
            slots: vec![None; flow_count * per_flow],
            due: BTreeSet::new(),
        }
    }

    fn slot(&self, f: FlowId, id: u8) -> usize {
        assert!(
            (id as usize) < self.per_flow,
            "timer {id} out of range for {} timers per flow",
            self.per_flow
        );
        f.index() * self.per_flow + id as usize
    }

    pub fn expiry(&self, f: FlowId, id: u8) -> Option<Cycle> {
        self.slots[self.slot(f, id)]
    }

    pub fn armed(&self) -> usize {
        self.due.len()
    }

    fn cancel(&mut self, f: FlowId, id: u8) {
        let k = self.slot(f, id);
        if let Some(at) = self.slots[k].take() {
            self.due.remove(&(at, f.0, id));
        }
    }

    /// Applies a timer instruction delivered at `now`. Starting a running timer restarts it.
    pub fn apply(&mut self, now: Cycle, t: TimerInstr) {
        self.cancel(t.flow, t.timer_id);
        match t.op {
            TimerOp::Start | TimerOp::Restart => {
                let at = now + t.delay;
                let k = self.slot(t.flow, t.timer_id);
                self.slots[k] = Some(at);
                self.due.insert((at, t.flow.0, t.timer_id));
            }
            TimerOp::Stop => {}
        }
    }

    /// Timers expiring at `now`, in (flow, timer id) order.
    pub fn tick(&mut self, now: Cycle) -> Vec<(FlowId, u8)> {
        let mut out = Vec::new();
        while let Some(&(at, f, id)) = self.due.first() {
            assert!(at >= now, "timer due at {at} missed at {now}");
            if at > now {
                break;
            }
            self.due.pop_first();
            let k = self.slot(FlowId(f), id);
            self.slots[k] = None;
            out.push((FlowId(f), id));
        }
        out
    }
}
