//! Per-flow event store and the eligibility-tracking scheduler.
//!
//! A flow is eligible when its FIFO is non-empty and none of its events is in
//! the processing engine. The scheduler never re-reads occupancy on return:
//! it relies on the last-event bit stamped at dequeue plus an arrival flag
//! recording whether anything landed while the event was in flight.

use std::collections::VecDeque;

use crate::types::{Cycle, Event, FlowId};

/// Per-flow ring buffers with independent head/tail pointers and an
/// occupancy counter per flow.
#[derive(Debug)]
pub struct EventStore {
    depth: u32,
    slots: Vec<Option<Event>>,
    head: Vec<u32>,
    tail: Vec<u32>,
    occupancy: Vec<u32>,
}

impl EventStore {
    pub fn new(flow_count: usize, depth: usize) -> Self {
        assert!(depth.is_power_of_two(), "event buffer depth must be a power of two");
        Self {
            depth: depth as u32,
            slots: vec![None; flow_count * depth],
            head: vec![0; flow_count],
            tail: vec![0; flow_count],
            occupancy: vec![0; flow_count],
        }
    }

    pub fn depth(&self) -> usize {
        self.depth as usize
    }

    pub fn occupancy(&self, flow: FlowId) -> u32 {
        self.occupancy[flow.index()]
    }

    /// Pointers run modulo twice the depth so full and empty are distinguishable.
    fn span(&self) -> u32 {
        self.depth * 2
    }

    fn slot(&self, flow: FlowId, ptr: u32) -> usize {
        flow.index() * self.depth as usize + (ptr & (self.depth - 1)) as usize
    }

    fn push(&mut self, e: Event) -> Result<u32, Event> {
        let f = e.flow;
        if self.occupancy[f.index()] == self.depth {
            return Err(e);
        }
        let t = self.tail[f.index()];
        let idx = self.slot(f, t);
        debug_assert!(self.slots[idx].is_none());
        self.slots[idx] = Some(e);
        self.tail[f.index()] = (t + 1) % self.span();
        self.occupancy[f.index()] += 1;
        Ok(self.occupancy[f.index()])
    }

    fn pop(&mut self, f: FlowId) -> Option<(Event, u32)> {
        if self.occupancy[f.index()] == 0 {
            return None;
        }
        let h = self.head[f.index()];
        let idx = self.slot(f, h);
        let e = self.slots[idx].take().expect("occupied slot");
        self.head[f.index()] = (h + 1) % self.span();
        self.occupancy[f.index()] -= 1;
        Some((e, self.occupancy[f.index()]))
    }

    fn check(&self) {
        for f in 0..self.occupancy.len() {
            let derived = (self.tail[f] + self.span() - self.head[f]) % self.span();
            assert_eq!(derived, self.occupancy[f], "occupancy drift on flow {f}");
            assert!(self.occupancy[f] <= self.depth);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Queued {
    No,
    Eligible,
    Held,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    /// Flow appended to the eligible FIFO.
    Eligible,
    /// Flow is otherwise eligible but backpressured.
    Held,
    /// Flow was already queued or in flight; nothing moved.
    Unchanged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IngestOutcome {
    Accepted { occupancy: u32, placement: Placement },
    QueueFull,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReturnOutcome {
    Requeued(Placement),
    Idle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackpressureChange {
    /// Flow moved from the eligible FIFO to the hold queue.
    Held,
    /// Flow moved from the hold queue back to the eligible FIFO.
    Released,
    /// Flag changed but the flow was not queued.
    FlagOnly,
    None,
}

#[derive(Debug)]
pub struct Scheduler {
    /// Flow ids with the cycle they were appended.
    eligible: VecDeque<(FlowId, Cycle)>,
    held: VecDeque<FlowId>,
    queued: Vec<Queued>,
    in_flight: Vec<bool>,
    /// Flag A: an event arrived after the in-flight event was dispatched.
    arrived_since_dispatch: Vec<bool>,
    /// Flag B: an event arrived while the flow was idle (consumed on enqueue).
    arrived_while_idle: Vec<bool>,
    backpressured: Vec<bool>,
}

impl Scheduler {
    pub fn new(flow_count: usize) -> Self {
        Self {
            eligible: VecDeque::with_capacity(flow_count),
            held: VecDeque::new(),
            queued: vec![Queued::No; flow_count],
            in_flight: vec![false; flow_count],
            arrived_since_dispatch: vec![false; flow_count],
            arrived_while_idle: vec![false; flow_count],
            backpressured: vec![false; flow_count],
        }
    }

    fn enqueue(&mut self, f: FlowId, now: Cycle) -> Placement {
        debug_assert_eq!(self.queued[f.index()], Queued::No);
        debug_assert!(!self.in_flight[f.index()]);
        self.arrived_while_idle[f.index()] = false;
        if self.backpressured[f.index()] {
            self.queued[f.index()] = Queued::Held;
            self.held.push_back(f);
            Placement::Held
        } else {
            self.queued[f.index()] = Queued::Eligible;
            self.eligible.push_back((f, now));
            Placement::Eligible
        }
    }

    pub fn is_in_flight(&self, f: FlowId) -> bool {
        self.in_flight[f.index()]
    }

    pub fn is_backpressured(&self, f: FlowId) -> bool {
        self.backpressured[f.index()]
    }

    pub fn eligible_len(&self) -> usize {
        self.eligible.len()
    }

    pub fn held_flows(&self) -> impl Iterator<Item = FlowId> + '_ {
        self.held.iter().copied()
    }

    pub fn held_position(&self, f: FlowId) -> Option<usize> {
        self.held.iter().position(|&h| h == f)
    }
}

/// The event store and scheduler together, exposing the four scheduling operations.
#[derive(Debug)]
pub struct EventScheduler {
    pub store: EventStore,
    pub sched: Scheduler,
    last_ingest: Option<Cycle>,
    last_dispatch: Option<Cycle>,
}

impl EventScheduler {
    pub fn new(flow_count: usize, depth: usize) -> Self {
        Self {
            store: EventStore::new(flow_count, depth),
            sched: Scheduler::new(flow_count),
            last_ingest: None,
            last_dispatch: None,
        }
    }

    pub fn ingest(&mut self, now: Cycle, e: Event) -> IngestOutcome {
        assert_ne!(self.last_ingest, Some(now), "second ingest in cycle {now}");
        let f = e.flow;
        let occupancy = match self.store.push(e) {
            Ok(occ) => occ,
            Err(_) => return IngestOutcome::QueueFull,
        };
        self.last_ingest = Some(now);
        let s = &mut self.sched;
        let placement = if s.in_flight[f.index()] {
            s.arrived_since_dispatch[f.index()] = true;
            Placement::Unchanged
        } else if s.queued[f.index()] != Queued::No {
            Placement::Unchanged
        } else {
            s.arrived_while_idle[f.index()] = true;
            s.enqueue(f, now)
        };
        IngestOutcome::Accepted {
            occupancy,
            placement,
        }
    }

    /// Pops the head eligible flow and dequeues its head event.
    ///
    /// Flows that became eligible during `now` are not visible until `now + 1`.
    pub fn dispatch(&mut self, now: Cycle) -> Option<Event> {
        assert_ne!(self.last_dispatch, Some(now), "second dispatch in cycle {now}");
        let &(f, since) = self.sched.eligible.front()?;
        if since >= now {
            return None;
        }
        self.sched.eligible.pop_front();
        self.last_dispatch = Some(now);
        let s = &mut self.sched;
        debug_assert!(!s.backpressured[f.index()]);
        s.queued[f.index()] = Queued::No;
        let (mut e, occ_after) = self
            .store
            .pop(f)
            .unwrap_or_else(|| panic!("eligible flow {f} has an empty FIFO"));
        e.last_event = occ_after == 0;
        s.in_flight[f.index()] = true;
        s.arrived_since_dispatch[f.index()] = false;
        Some(e)
    }

    pub fn on_event_return(&mut self, now: Cycle, e: &Event) -> ReturnOutcome {
        let f = e.flow;
        let s = &mut self.sched;
        assert!(
            s.in_flight[f.index()],
            "event {} returned for flow {f} which is not in flight",
            e.serial
        );
        s.in_flight[f.index()] = false;
        let more = !e.last_event || s.arrived_since_dispatch[f.index()];
        s.arrived_since_dispatch[f.index()] = false;
        if more {
            debug_assert!(self.store.occupancy(f) > 0);
            ReturnOutcome::Requeued(s.enqueue(f, now))
        } else {
            debug_assert_eq!(self.store.occupancy(f), 0);
            ReturnOutcome::Idle
        }
    }

    pub fn set_backpressure(&mut self, now: Cycle, f: FlowId, on: bool) -> BackpressureChange {
        let s = &mut self.sched;
        if s.backpressured[f.index()] == on {
            return BackpressureChange::None;
        }
        s.backpressured[f.index()] = on;
        match (on, s.queued[f.index()]) {
            (true, Queued::Eligible) => {
                let pos = s
                    .eligible
                    .iter()
                    .position(|&(g, _)| g == f)
                    .expect("queued flow present in eligible FIFO");
                s.eligible.remove(pos);
                s.queued[f.index()] = Queued::Held;
                s.held.push_back(f);
                BackpressureChange::Held
            }
            (false, Queued::Held) => {
                let pos = s.held_position(f).expect("held flow present in hold queue");
                s.held.remove(pos);
                s.queued[f.index()] = Queued::Eligible;
                s.eligible.push_back((f, now));
                BackpressureChange::Released
            }
            _ => BackpressureChange::FlagOnly,
        }
    }

    /// Panics if any structural invariant is broken.
    pub fn check_invariants(&self) {
        self.store.check();
        let s = &self.sched;
        let n = s.queued.len();
        let mut seen = vec![0u8; n];
        for &(f, _) in &s.eligible {
            seen[f.index()] += 1;
            assert_eq!(s.queued[f.index()], Queued::Eligible);
            assert!(!s.backpressured[f.index()]);
        }
        for &f in &s.held {
            seen[f.index()] += 1;
            assert_eq!(s.queued[f.index()], Queued::Held);
        }
        for f in 0..n {
            if s.in_flight[f] {
                seen[f] += 1;
            }
            assert!(seen[f] <= 1, "flow {f} appears {} times", seen[f]);
            if s.queued[f] != Queued::No {
                assert!(self.store.occupancy[f] > 0, "queued flow {f} has no events");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::BitVector;
    use crate::types::EventType;

    fn ev(flow: u32, serial: u64) -> Event {
        let mut e = Event::new(FlowId(flow), EventType(0), BitVector::zeros(8));
        e.serial = serial;
        e
    }

    #[test]
    fn idle_flow_becomes_eligible() {
        let mut s = EventScheduler::new(8, 4);
        let out = s.ingest(0, ev(7, 0));
        assert_eq!(
            out,
            IngestOutcome::Accepted {
                occupancy: 1,
                placement: Placement::Eligible
            }
        );
        assert_eq!(s.sched.eligible_len(), 1);
        s.check_invariants();
    }

    #[test]
    fn full_queue_leaves_state_unchanged() {
        let mut s = EventScheduler::new(2, 2);
        s.ingest(0, ev(1, 0));
        s.ingest(1, ev(1, 1));
        assert_eq!(s.ingest(2, ev(1, 2)), IngestOutcome::QueueFull);
        assert_eq!(s.store.occupancy(FlowId(1)), 2);
        // A rejected ingest does not consume the cycle's port.
        assert!(matches!(s.ingest(2, ev(0, 3)), IngestOutcome::Accepted { .. }));
        s.check_invariants();
    }

    #[test]
    fn in_flight_flow_not_requeued_on_arrival() {
        let mut s = EventScheduler::new(4, 8);
        s.ingest(0, ev(3, 0));
        let e = s.dispatch(1).unwrap();
        assert!(e.last_event);
        for (c, serial) in [(2, 1), (3, 2)] {
            let out = s.ingest(c, ev(3, serial));
            assert!(matches!(
                out,
                IngestOutcome::Accepted {
                    placement: Placement::Unchanged,
                    ..
                }
            ));
        }
        assert_eq!(s.sched.eligible_len(), 0);
        assert!(s.sched.arrived_since_dispatch[3]);
        // The stale last-event bit is overridden by the arrival flag.
        assert_eq!(
            s.on_event_return(4, &e),
            ReturnOutcome::Requeued(Placement::Eligible)
        );
        s.check_invariants();
    }

    #[test]
    fn empty_dispatch_returns_nothing() {
        let mut s = EventScheduler::new(4, 8);
        assert!(s.dispatch(0).is_none());
    }

    #[test]
    fn same_cycle_ingest_not_dispatchable() {
        let mut s = EventScheduler::new(4, 8);
        s.ingest(5, ev(0, 0));
        assert!(s.dispatch(5).is_none());
        assert!(s.dispatch(6).is_some());
    }

    #[test]
    fn two_event_last_bit_schedule() {
        let mut s = EventScheduler::new(1, 8);
        s.ingest(0, ev(0, 0));
        s.ingest(1, ev(0, 1));
        let first = s.dispatch(2).unwrap();
        assert!(!first.last_event);
        assert_eq!(
            s.on_event_return(5, &first),
            ReturnOutcome::Requeued(Placement::Eligible)
        );
        let second = s.dispatch(6).unwrap();
        assert!(second.last_event);
        assert_eq!(s.on_event_return(9, &second), ReturnOutcome::Idle);
        s.check_invariants();
    }

    #[test]
    fn return_with_last_true_and_no_arrivals_goes_idle() {
        let mut s = EventScheduler::new(1, 8);
        s.ingest(0, ev(0, 0));
        let e = s.dispatch(1).unwrap();
        assert_eq!(s.on_event_return(4, &e), ReturnOutcome::Idle);
        assert!(s.dispatch(5).is_none());
    }

    #[test]
    #[should_panic(expected = "not in flight")]
    fn return_for_idle_flow_is_fatal() {
        let mut s = EventScheduler::new(1, 8);
        s.on_event_return(0, &ev(0, 0));
    }

    #[test]
    fn backpressure_holds_then_releases_in_order() {
        let mut s = EventScheduler::new(4, 8);
        s.ingest(0, ev(2, 0));
        s.ingest(1, ev(1, 1));
        assert_eq!(s.set_backpressure(1, FlowId(2), true), BackpressureChange::Held);
        assert_eq!(s.set_backpressure(1, FlowId(1), true), BackpressureChange::Held);
        for c in 2..12 {
            assert!(s.dispatch(c).is_none());
        }
        let order: Vec<_> = s.sched.held_flows().collect();
        assert_eq!(order, vec![FlowId(2), FlowId(1)]);
        for f in order {
            assert_eq!(s.set_backpressure(12, f, false), BackpressureChange::Released);
        }
        assert_eq!(s.dispatch(13).unwrap().flow, FlowId(2));
        assert_eq!(s.dispatch(14).unwrap().flow, FlowId(1));
        s.check_invariants();
    }

    #[test]
    fn backpressured_idle_flow_ingests_into_hold() {
        let mut s = EventScheduler::new(2, 8);
        assert_eq!(s.set_backpressure(0, FlowId(0), true), BackpressureChange::FlagOnly);
        assert!(matches!(
            s.ingest(0, ev(0, 0)),
            IngestOutcome::Accepted {
                placement: Placement::Held,
                ..
            }
        ));
        assert!(s.dispatch(1).is_none());
        s.set_backpressure(1, FlowId(0), false);
        assert!(s.dispatch(2).is_some());
    }
}
