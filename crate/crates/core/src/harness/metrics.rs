//! Summary statistics shared by the experiments.

use crate::types::Cycle;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Summary {
    pub samples: usize,
    pub mean: f64,
    pub p90: u64,
    pub max: u64,
}

/// Nearest-rank percentile, `q` in (0, 1].
pub fn percentile(sorted: &[u64], q: f64) -> u64 {
    assert!(!sorted.is_empty(), "percentile of no samples");
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn summarize(samples: &[u64]) -> Summary {
    if samples.is_empty() {
        return Summary::default();
    }
    let mut v = samples.to_vec();
    v.sort_unstable();
    Summary {
        samples: v.len(),
        mean: v.iter().sum::<u64>() as f64 / v.len() as f64,
        p90: percentile(&v, 0.9),
        max: *v.last().unwrap(),
    }
}

/// Per-window averages of a per-cycle counter, windows starting at `origin`.
pub fn windowed_rate(events: &[Cycle], origin: Cycle, window: u64, windows: usize) -> Vec<f64> {
    let mut bins = vec![0u64; windows];
    for &c in events {
        if c < origin {
            continue;
        }
        let k = ((c - origin) / window) as usize;
        if k < windows {
            bins[k] += 1;
        }
    }
    bins.into_iter().map(|n| n as f64 / window as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<u64> = (1..=10).collect();
        assert_eq!(percentile(&v, 0.9), 9);
        assert_eq!(percentile(&v, 1.0), 10);
        assert_eq!(percentile(&[5], 0.9), 5);
        let v: Vec<u64> = (1..=11).collect();
        assert_eq!(percentile(&v, 0.9), 10);
    }

    #[test]
    fn summary_of_samples() {
        let s = summarize(&[4, 1, 3, 2]);
        assert_eq!(s.samples, 4);
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.p90, 4);
        assert_eq!(summarize(&[]), Summary::default());
    }

    #[test]
    fn windows() {
        let ev = [10, 11, 12, 60, 61, 200];
        assert_eq!(windowed_rate(&ev, 10, 50, 2), vec![0.06, 0.04]);
    }
}
