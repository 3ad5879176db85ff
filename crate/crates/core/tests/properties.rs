//! End-to-end invariants under random loss, sizes and seeds.

use proptest::prelude::*;
use tpsim::config::SimConfig;
use tpsim::harness::link::{Link, LinkConfig, QueueMode};
use tpsim::harness::transfer::{message_mix, roce_messages, tcp_stream};
use tpsim::protocols::{RoceConfig, TcpConfig};

fn lossy(loss_rate: f64) -> LinkConfig {
    LinkConfig {
        one_way_delay: 200,
        loss_rate,
        ..LinkConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn link_conserves_bytes_and_order(
        sends in prop::collection::vec((0u64..4, 20usize..1600), 1..200),
        cap in prop::option::of(2_000u64..20_000),
        ecn in any::<bool>(),
        drain in 1.0f64..80.0,
        loss in 0.0f64..0.2,
        seed in any::<u64>(),
    ) {
        let cfg = LinkConfig {
            one_way_delay: 50,
            queue_capacity: cap,
            ecn_threshold: 3000,
            mode: if ecn { QueueMode::EcnMark } else { QueueMode::DropTail },
            drain_rate: drain,
            loss_rate: loss,
        };
        let mut link = Link::new(cfg, seed);
        let mut now = 0;
        let mut next_id = 0u32;
        let mut arrived = Vec::new();
        let mut sends = sends.into_iter();
        let mut pending = sends.next();
        loop {
            while let Some((gap, len)) = pending {
                if gap > 0 {
                    pending = Some((gap - 1, len));
                    break;
                }
                let mut p = vec![0u8; len];
                p[4..8].copy_from_slice(&next_id.to_be_bytes());
                next_id += 1;
                link.send(now, p);
                pending = sends.next();
            }
            for p in link.tick(now) {
                prop_assert!(ecn || p[2] == 0);
                arrived.push(u32::from_be_bytes([p[4], p[5], p[6], p[7]]));
            }
            prop_assert!(link.conserves());
            if let Some(c) = cap {
                prop_assert!(link.resident() <= c);
            }
            if pending.is_none() && link.is_idle() {
                break;
            }
            now += 1;
        }
        let s = link.stats();
        prop_assert!(arrived.windows(2).all(|w| w[0] < w[1]), "reordered delivery");
        prop_assert_eq!(s.packets_in, next_id as u64);
        prop_assert_eq!(s.packets_in, s.packets_out + s.packets_dropped);
        prop_assert_eq!(arrived.len() as u64, s.packets_out - s.lost);
        prop_assert!(ecn || s.marked == 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn tcp_stream_is_exactly_once(bytes in 1u32..150_000, loss in 0.0f64..0.05, seed in any::<u64>()) {
        let r = tcp_stream(&SimConfig::default(), &TcpConfig::default(), &lossy(loss), bytes, seed, 3_000_000);
        prop_assert!(r.exact(), "{:?}", r);
    }

    #[test]
    fn roce_completes_in_msn_order(count in 1usize..120, max_len in 1u32..6000, loss in 0.0f64..0.05, seed in any::<u64>()) {
        let msgs = message_mix(count, max_len, seed);
        let r = roce_messages(&SimConfig::default(), &RoceConfig::default(), &lossy(loss), &msgs, seed, 3_000_000);
        prop_assert!(r.exact(), "{:?}", r);
    }
}

#[test]
fn transfers_are_reproducible() {
    let run = || tcp_stream(&SimConfig::default(), &TcpConfig::default(), &lossy(0.02), 40_000, 9, 1_000_000);
    assert_eq!(run(), run());
    let msgs = message_mix(40, 2000, 9);
    let run = || roce_messages(&SimConfig::default(), &RoceConfig::default(), &lossy(0.02), &msgs, 9, 1_000_000);
    assert_eq!(run(), run());
}
