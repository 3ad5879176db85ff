//! One-directional link: a byte-bounded FIFO with drop-tail or ECN marking,
//! a modulated drain rate, random loss and fixed propagation delay.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::protocols::set_ecn;
use crate::types::Cycle;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueMode {
    #[default]
    DropTail,
    EcnMark,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    pub one_way_delay: Cycle,
    /// Queue capacity in bytes; unbounded when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queue_capacity: Option<u64>,
    /// Marking threshold in bytes, used in `ecn_mark` mode.
    pub ecn_threshold: u64,
    pub mode: QueueMode,
    /// Bytes per cycle outside any congestion window.
    pub drain_rate: f64,
    /// Probability that a packet leaving the queue is lost.
    pub loss_rate: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            one_way_delay: 800,
            queue_capacity: None,
            ecn_threshold: 3 * 1024,
            mode: QueueMode::DropTail,
            drain_rate: 50.0,
            loss_rate: 0.0,
        }
    }
}

/// A span of cycles during which the drain rate is replaced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrainWindow {
    pub start: Cycle,
    pub end: Cycle,
    pub rate: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub packets_in: u64,
    pub bytes_in: u64,
    pub packets_out: u64,
    pub bytes_out: u64,
    pub packets_dropped: u64,
    pub bytes_dropped: u64,
    pub marked: u64,
    /// Packets lost on the wire after leaving the queue.
    pub lost: u64,
    pub max_resident: u64,
}

#[derive(Debug)]
struct Queued {
    ready: Cycle,
    bytes: Vec<u8>,
}

#[derive(Debug)]
pub struct Link {
    cfg: LinkConfig,
    window: Option<DrainWindow>,
    queue: VecDeque<Queued>,
    resident: u64,
    credit: f64,
    wire: VecDeque<(Cycle, Vec<u8>)>,
    rng: ChaCha8Rng,
    stats: LinkStats,
}

impl Link {
    pub fn new(cfg: LinkConfig, seed: u64) -> Self {
        assert!(cfg.drain_rate > 0.0, "drain rate must be positive");
        assert!((0.0..1.0).contains(&cfg.loss_rate), "loss rate must lie in [0, 1)");
        Self {
            cfg,
            window: None,
            queue: VecDeque::new(),
            resident: 0,
            credit: 0.0,
            wire: VecDeque::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: LinkStats::default(),
        }
    }

    pub fn with_window(mut self, w: DrainWindow) -> Self {
        assert!(w.rate > 0.0 && w.start <= w.end);
        self.window = Some(w);
        self
    }

    pub fn config(&self) -> &LinkConfig {
        &self.cfg
    }

    pub fn stats(&self) -> LinkStats {
        self.stats
    }

    pub fn resident(&self) -> u64 {
        self.resident
    }

    pub fn drain_rate(&self, now: Cycle) -> f64 {
        match self.window {
            Some(w) if now >= w.start && now < w.end => w.rate,
            _ => self.cfg.drain_rate,
        }
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty() && self.wire.is_empty()
    }

    /// Offers a packet whose last byte reaches the queue in cycle `ready`.
    pub fn send(&mut self, ready: Cycle, mut bytes: Vec<u8>) {
        let len = bytes.len() as u64;
        self.stats.packets_in += 1;
        self.stats.bytes_in += len;
        if self.cfg.queue_capacity.is_some_and(|cap| self.resident + len > cap) {
            self.stats.packets_dropped += 1;
            self.stats.bytes_dropped += len;
            return;
        }
        if self.cfg.mode == QueueMode::EcnMark && self.resident >= self.cfg.ecn_threshold {
            set_ecn(&mut bytes);
            self.stats.marked += 1;
        }
        self.resident += len;
        self.stats.max_resident = self.stats.max_resident.max(self.resident);
        self.queue.push_back(Queued { ready, bytes });
    }

    /// Drains the queue for one cycle and returns packets arriving at the far end.
    pub fn tick(&mut self, now: Cycle) -> Vec<Vec<u8>> {
        if self.queue.front().is_some_and(|q| q.ready <= now) {
            self.credit += self.drain_rate(now);
            while let Some(q) = self.queue.front() {
                let len = q.bytes.len() as f64;
                if q.ready > now || self.credit < len {
                    break;
                }
                self.credit -= len;
                let q = self.queue.pop_front().unwrap();
                self.resident -= q.bytes.len() as u64;
                self.stats.packets_out += 1;
                self.stats.bytes_out += q.bytes.len() as u64;
                if self.cfg.loss_rate > 0.0 && self.rng.gen_bool(self.cfg.loss_rate) {
                    self.stats.lost += 1;
                    continue;
                }
                self.wire.push_back((now + self.cfg.one_way_delay, q.bytes));
            }
        } else {
            self.credit = 0.0;
        }
        if self.queue.is_empty() {
            self.credit = 0.0;
        }
        let mut out = Vec::new();
        while self.wire.front().is_some_and(|(at, _)| *at <= now) {
            out.push(self.wire.pop_front().unwrap().1);
        }
        out
    }

    /// Bytes in = bytes out + bytes dropped + bytes resident.
    pub fn conserves(&self) -> bool {
        self.stats.bytes_in == self.stats.bytes_out + self.stats.bytes_dropped + self.resident
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pkt(len: usize) -> Vec<u8> {
        vec![0; len]
    }

    #[test]
    fn delay_and_serialization() {
        let mut l = Link::new(
            LinkConfig {
                drain_rate: 10.0,
                ..LinkConfig::default()
            },
            1,
        );
        l.send(0, pkt(25));
        let arrivals: Vec<_> = (0..1000).filter(|&c| !l.tick(c).is_empty()).collect();
        assert_eq!(arrivals, vec![2 + 800]);
    }

    #[test]
    fn drop_tail_never_marks() {
        let mut l = Link::new(
            LinkConfig {
                queue_capacity: Some(100),
                ..LinkConfig::default()
            },
            1,
        );
        for _ in 0..5 {
            l.send(10, pkt(30));
        }
        let s = l.stats();
        assert_eq!((s.packets_dropped, s.marked, l.resident()), (2, 0, 90));
        assert!(l.conserves());
    }

    #[test]
    fn ecn_marks_above_threshold_only() {
        let mut l = Link::new(
            LinkConfig {
                queue_capacity: Some(1000),
                ecn_threshold: 60,
                mode: QueueMode::EcnMark,
                ..LinkConfig::default()
            },
            1,
        );
        for _ in 0..4 {
            l.send(10, pkt(30));
        }
        assert_eq!(l.stats().marked, 2);
        assert_eq!(l.stats().packets_dropped, 0);
        let got: Vec<_> = (0..2000).flat_map(|c| l.tick(c)).collect();
        let marks: Vec<_> = got.iter().map(|p| p[2] & 1).collect();
        assert_eq!(marks, vec![0, 0, 1, 1]);
    }

    #[test]
    fn window_halves_drain() {
        let l = Link::new(LinkConfig::default(), 1).with_window(DrainWindow {
            start: 100,
            end: 200,
            rate: 0.4,
        });
        assert_eq!(l.drain_rate(99), 50.0);
        assert_eq!(l.drain_rate(100), 0.4);
        assert_eq!(l.drain_rate(200), 50.0);
    }
}
