use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ms_to_us, sample_delay, DelaySpec, WireMessage};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InFlight {
    pub message: WireMessage,
    pub sent_at_us: u64,
    pub deliver_at_us: u64,
}

#[derive(Debug, PartialEq, Eq)]
struct Entry {
    deliver_at_us: u64,
    order: u64,
    flight: InFlight,
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.deliver_at_us, self.order).cmp(&(other.deliver_at_us, other.order))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// One direction of an in-memory network driven by a virtual clock.
#[derive(Debug)]
pub struct SimChannel {
    spec: DelaySpec,
    drop_prob: f64,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<Entry>>,
    next_order: u64,
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

impl SimChannel {
    /// `spec` is the one-way delay for this direction.
    pub fn new(spec: DelaySpec, drop_prob: f64, seed: u64) -> Self {
        Self {
            spec,
            drop_prob: drop_prob.clamp(0.0, 1.0),
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: BinaryHeap::new(),
            next_order: 0,
            sent: 0,
            delivered: 0,
            dropped: 0,
        }
    }

    pub fn spec(&self) -> &DelaySpec {
        &self.spec
    }

    /// Schedule `msg`; returns its delivery time, or `None` if it was dropped.
    pub fn send(&mut self, msg: WireMessage, now_us: u64) -> Option<u64> {
        self.sent += 1;
        let delay = sample_delay(&self.spec, &mut self.rng);
        if self.drop_prob > 0.0 && self.rng.random::<f64>() < self.drop_prob {
            self.dropped += 1;
            return None;
        }
        let deliver_at_us = now_us + ms_to_us(delay);
        let order = self.next_order;
        self.next_order += 1;
        self.queue.push(Reverse(Entry {
            deliver_at_us,
            order,
            flight: InFlight {
                message: msg,
                sent_at_us: now_us,
                deliver_at_us,
            },
        }));
        Some(deliver_at_us)
    }

    /// Everything due at or before `now_us`, in delivery order.
    pub fn poll(&mut self, now_us: u64) -> Vec<InFlight> {
        let mut out = Vec::new();
        while self.queue.peek().is_some_and(|e| e.0.deliver_at_us <= now_us) {
            out.push(self.queue.pop().expect("peeked").0.flight);
        }
        self.delivered += out.len() as u64;
        out
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn msg(seq: u32) -> WireMessage {
        WireMessage::frame(seq, 0, 0, 1, 1, vec![seq as u8])
    }

    #[test]
    fn constant_delay_delivers_exactly() {
        let mut ch = SimChannel::new(DelaySpec::constant(10.0), 0.0, 0);
        assert_eq!(ch.send(msg(0), 1_000), Some(11_000));
        assert!(ch.poll(10_999).is_empty());
        let got = ch.poll(11_000);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].deliver_at_us, 11_000);
    }

    #[test]
    fn jitter_can_reorder() {
        let spec = DelaySpec::normal(50.0, 20.0);
        let seed = (0..100)
            .find(|&s| {
                let mut ch = SimChannel::new(spec, 0.0, s);
                let a = ch.send(msg(0), 0).unwrap();
                let b = ch.send(msg(1), 1_000).unwrap();
                b < a
            })
            .expect("some seed reorders");
        let mut ch = SimChannel::new(spec, 0.0, seed);
        ch.send(msg(0), 0);
        ch.send(msg(1), 1_000);
        let seqs: Vec<u32> = ch.poll(u64::MAX).iter().map(|f| f.message.seq).collect();
        assert_eq!(seqs, vec![1, 0]);
    }

    #[test]
    fn drop_all_never_delivers() {
        let mut ch = SimChannel::new(DelaySpec::constant(1.0), 1.0, 0);
        for i in 0..50 {
            assert_eq!(ch.send(msg(i), i as u64), None);
        }
        assert!(ch.poll(u64::MAX).is_empty());
        assert_eq!(ch.dropped, 50);
    }

    proptest! {
        #[test]
        fn conservation_and_min_delay(
            seed in any::<u64>(),
            mean in 0.0f64..100.0,
            sigma in 0.0f64..40.0,
            min in 0.0f64..20.0,
            drop in 0.0f64..0.5,
            n in 1usize..60,
        ) {
            let spec = DelaySpec { min_ms: min, ..DelaySpec::normal(mean, sigma) };
            let mut ch = SimChannel::new(spec, drop, seed);
            let mut seen = std::collections::HashSet::new();
            let mut delivered = 0;
            for i in 0..n {
                let now = i as u64 * 5_000;
                ch.send(msg(i as u32), now);
                for f in ch.poll(now) {
                    prop_assert!(f.deliver_at_us >= f.sent_at_us + ms_to_us(min));
                    prop_assert!(f.deliver_at_us <= now);
                    prop_assert!(seen.insert(f.message.seq));
                    delivered += 1;
                }
            }
            for f in ch.poll(u64::MAX) {
                prop_assert!(seen.insert(f.message.seq));
                delivered += 1;
            }
            prop_assert_eq!(delivered + ch.dropped, n as u64);
        }

        #[test]
        fn replay_is_deterministic(seed in any::<u64>()) {
            let run = || {
                let mut ch = SimChannel::new(DelaySpec::normal(30.0, 10.0), 0.1, seed);
                (0..20).map(|i| ch.send(msg(i), i as u64 * 1000)).collect::<Vec<_>>()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
