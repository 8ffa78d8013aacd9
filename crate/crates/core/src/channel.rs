//! Slotted broadcast channel with collision-based drops.
//!
//! Senders pick a message size; the channel picks a starting slot per message
//! (how depends on the placement variant), then any two messages whose slot
//! ranges overlap are both lost. Delivery is all-or-nothing per message and
//! everything delivered is received by every agent; excluding a sender's own
//! message from its inbound set is the receiving agent's job, not the
//! channel's.

use rand::Rng;

/// One outbound message. The size is the payload length.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub sender: usize,
    pub payload: Vec<f32>,
}

impl Message {
    pub fn size(&self) -> usize {
        self.payload.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Starts restricted to multiples of the message's own size.
    Spacing,
    /// Any start that fits.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Capacity {
    Slots(usize),
    Unlimited,
}

#[derive(Clone, Copy, Debug)]
pub struct Channel {
    pub capacity: Capacity,
    pub variant: Variant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropCause {
    Oversize,
    Collision,
}

#[derive(Clone, Debug)]
pub struct Delivered {
    pub message: Message,
    pub start: usize,
}

#[derive(Clone, Debug)]
pub struct DroppedMsg {
    pub message: Message,
    /// Slot the message was placed at; absent for oversize drops.
    pub start: Option<usize>,
    pub cause: DropCause,
}

#[derive(Clone, Debug, Default)]
pub struct ChannelOutcome {
    pub delivered: Vec<Delivered>,
    pub dropped: Vec<DroppedMsg>,
    /// Total slots covered by delivered messages this step.
    pub occupied_slots: usize,
}

impl Channel {
    pub fn unlimited() -> Self {
        Channel { capacity: Capacity::Unlimited, variant: Variant::Spacing }
    }

    pub fn slotted(capacity: usize, variant: Variant) -> Self {
        assert!(capacity >= 1, "capacity must be at least one slot");
        Channel { capacity: Capacity::Slots(capacity), variant }
    }

    /// Number of possible starting slots for a message of `size`, or `None`
    /// when the message cannot fit at all.
    pub fn start_options(&self, size: usize) -> Option<usize> {
        assert!(size >= 1, "size-0 messages never enter the channel");
        match self.capacity {
            Capacity::Unlimited => Some(1),
            Capacity::Slots(c) if size > c => None,
            Capacity::Slots(c) => match self.variant {
                Variant::Spacing => Some((c - size) / size + 1),
                Variant::Uniform => Some(c - size + 1),
            },
        }
    }

    /// Draw a placement for each message, consuming the rng in input order
    /// (callers pass messages in agent-id order). `None` marks oversize.
    fn place(&self, messages: &[Message], rng: &mut impl Rng) -> Vec<Option<usize>> {
        messages
            .iter()
            .map(|m| {
                debug_assert!(m.payload.iter().all(|p| (-1.0..=1.0).contains(p)));
                match self.capacity {
                    Capacity::Unlimited => Some(0),
                    Capacity::Slots(_) => self.start_options(m.size()).map(|opts| {
                        let k = rng.gen_range(0..opts);
                        match self.variant {
                            Variant::Spacing => k * m.size(),
                            Variant::Uniform => k,
                        }
                    }),
                }
            })
            .collect()
    }

    /// Place and resolve one step's messages. On an unlimited channel nothing
    /// collides and no randomness is consumed; delivered messages get
    /// consecutive virtual slots.
    pub fn step(&self, messages: Vec<Message>, rng: &mut impl Rng) -> ChannelOutcome {
        debug_assert!(messages.windows(2).all(|w| w[0].sender < w[1].sender));
        debug_assert!(messages.iter().all(|m| m.size() >= 1));
        if let Capacity::Unlimited = self.capacity {
            let mut out = ChannelOutcome::default();
            let mut next = 0;
            for m in messages {
                let size = m.size();
                out.delivered.push(Delivered { message: m, start: next });
                next += size;
            }
            out.occupied_slots = next;
            return out;
        }

        let starts = self.place(&messages, rng);
        let n = messages.len();
        let mut collides = vec![false; n];
        for i in 0..n {
            let Some(si) = starts[i] else { continue };
            let (ai, bi) = (si, si + messages[i].size());
            for j in i + 1..n {
                let Some(sj) = starts[j] else { continue };
                let (aj, bj) = (sj, sj + messages[j].size());
                if ai < bj && aj < bi {
                    collides[i] = true;
                    collides[j] = true;
                }
            }
        }
        let mut out = ChannelOutcome::default();
        for ((message, start), hit) in messages.into_iter().zip(starts).zip(collides) {
            match start {
                None => out.dropped.push(DroppedMsg { message, start: None, cause: DropCause::Oversize }),
                Some(s) if hit => {
                    out.dropped.push(DroppedMsg { message, start: Some(s), cause: DropCause::Collision })
                }
                Some(s) => {
                    out.occupied_slots += message.size();
                    out.delivered.push(Delivered { message, start: s });
                }
            }
        }
        if let Capacity::Slots(c) = self.capacity {
            debug_assert!(out.occupied_slots <= c);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SizeDropStat {
    pub size: usize,
    pub sent: u64,
    pub dropped: u64,
    pub drop_rate: f64,
    pub std_err: f64,
}

#[derive(Clone, Debug)]
pub struct DropStats {
    pub per_size: Vec<SizeDropStat>,
    pub mean_throughput: f64,
    pub steps: u64,
}

/// Monte-Carlo drop statistics: each step every agent draws a size uniformly
/// from `sizes` (zeros mean silence) and the channel resolves the rest.
pub fn drop_stats_monte_carlo(
    channel: &Channel,
    sizes: &[usize],
    n_agents: usize,
    steps: u64,
    rng: &mut impl Rng,
) -> DropStats {
    assert!(!sizes.is_empty());
    let nonzero: Vec<usize> = {
        let mut s: Vec<usize> = sizes.iter().copied().filter(|&s| s > 0).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let mut sent = vec![0u64; nonzero.len()];
    let mut dropped = vec![0u64; nonzero.len()];
    let mut slots_total = 0u64;
    for _ in 0..steps {
        let mut messages = Vec::with_capacity(n_agents);
        for agent in 0..n_agents {
            let size = sizes[rng.gen_range(0..sizes.len())];
            if size > 0 {
                messages.push(Message { sender: agent, payload: vec![0.0; size] });
            }
        }
        for m in &messages {
            sent[nonzero.binary_search(&m.size()).unwrap()] += 1;
        }
        let outcome = channel.step(messages, rng);
        slots_total += outcome.occupied_slots as u64;
        for d in &outcome.dropped {
            dropped[nonzero.binary_search(&d.message.size()).unwrap()] += 1;
        }
    }
    let per_size = nonzero
        .iter()
        .zip(sent.iter().zip(&dropped))
        .map(|(&size, (&sent, &dropped))| {
            let p = if sent == 0 { 0.0 } else { dropped as f64 / sent as f64 };
            let se = if sent == 0 { 0.0 } else { (p * (1.0 - p) / sent as f64).sqrt() };
            SizeDropStat { size, sent, dropped, drop_rate: p, std_err: se }
        })
        .collect();
    DropStats { per_size, mean_throughput: slots_total as f64 / steps as f64, steps }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn msg(sender: usize, size: usize) -> Message {
        Message { sender, payload: vec![0.0; size] }
    }

    #[test]
    fn spacing_start_options_follow_size_multiples() {
        let ch = Channel::slotted(8, Variant::Spacing);
        // size 3 in 8 slots: starts {0, 3}
        assert_eq!(ch.start_options(3), Some(2));
        assert_eq!(ch.start_options(4), Some(2));
        assert_eq!(ch.start_options(8), Some(1));
        assert_eq!(ch.start_options(9), None);
        let un = Channel::slotted(8, Variant::Uniform);
        assert_eq!(un.start_options(3), Some(6));
        assert_eq!(un.start_options(8), Some(1));
    }

    #[test]
    fn placements_in_spacing_mode_are_size_aligned() {
        let ch = Channel::slotted(8, Variant::Spacing);
        let mut rng = stream(11, Stream::EnvChannel(0));
        for _ in 0..200 {
            let out = ch.step(vec![msg(0, 2), msg(1, 4)], &mut rng);
            for d in &out.delivered {
                assert_eq!(d.start % d.message.size(), 0);
            }
            for d in &out.dropped {
                assert_eq!(d.start.unwrap() % d.message.size(), 0);
            }
        }
    }

    #[test]
    fn overlapping_messages_are_both_lost() {
        let ch = Channel::slotted(8, Variant::Spacing);
        let mut rng = stream(5, Stream::EnvChannel(0));
        let mut saw_both = (false, false);
        for _ in 0..100 {
            let out = ch.step(vec![msg(0, 4), msg(1, 4)], &mut rng);
            match out.delivered.len() {
                2 => {
                    saw_both.0 = true;
                    let a = &out.delivered[0];
                    let b = &out.delivered[1];
                    let disjoint = a.start + 4 <= b.start || b.start + 4 <= a.start;
                    assert!(disjoint);
                    assert_eq!(out.occupied_slots, 8);
                }
                0 => {
                    saw_both.1 = true;
                    assert_eq!(out.dropped.len(), 2);
                    assert!(out.dropped.iter().all(|d| d.cause == DropCause::Collision));
                    assert_eq!(out.occupied_slots, 0);
                }
                n => panic!("two size-4 messages in 8 slots cannot deliver {n}"),
            }
        }
        assert!(saw_both.0 && saw_both.1, "both outcomes should occur over 100 draws");
    }

    #[test]
    fn oversize_is_dropped_without_consuming_randomness() {
        let ch = Channel::slotted(8, Variant::Spacing);
        let mut a = stream(9, Stream::EnvChannel(0));
        let out = ch.step(vec![msg(0, 9), msg(1, 4)], &mut a);
        assert_eq!(out.dropped.len(), 1);
        assert_eq!(out.dropped[0].cause, DropCause::Oversize);
        assert_eq!(out.dropped[0].start, None);
        assert_eq!(out.delivered.len(), 1);

        // the size-4 placement must be the same as if the oversize message
        // were never offered
        let mut b = stream(9, Stream::EnvChannel(0));
        let alone = ch.step(vec![msg(1, 4)], &mut b);
        assert_eq!(alone.delivered[0].start, out.delivered[0].start);
    }

    #[test]
    fn unlimited_channel_delivers_everything() {
        let ch = Channel::unlimited();
        let mut rng = stream(1, Stream::EnvChannel(0));
        let out = ch.step(vec![msg(0, 4), msg(1, 4), msg(2, 4), msg(3, 4)], &mut rng);
        assert_eq!(out.delivered.len(), 4);
        assert_eq!(out.dropped.len(), 0);
        assert_eq!(out.occupied_slots, 16);
    }

    #[test]
    fn same_seed_same_outcomes() {
        let ch = Channel::slotted(8, Variant::Uniform);
        for seed in 0..5u64 {
            let mut a = stream(seed, Stream::EnvChannel(3));
            let mut b = stream(seed, Stream::EnvChannel(3));
            for _ in 0..50 {
                let x = ch.step(vec![msg(0, 1), msg(1, 2), msg(2, 4)], &mut a);
                let y = ch.step(vec![msg(0, 1), msg(1, 2), msg(2, 4)], &mut b);
                let xs: Vec<_> = x.delivered.iter().map(|d| (d.message.sender, d.start)).collect();
                let ys: Vec<_> = y.delivered.iter().map(|d| (d.message.sender, d.start)).collect();
                assert_eq!(xs, ys);
            }
        }
    }

    #[test]
    fn monte_carlo_stats_count_all_drop_causes() {
        let ch = Channel::slotted(4, Variant::Uniform);
        let mut rng = stream(2, Stream::EnvChannel(0));
        let stats = drop_stats_monte_carlo(&ch, &[0, 2, 8], 3, 2_000, &mut rng);
        let oversize = stats.per_size.iter().find(|s| s.size == 8).unwrap();
        assert_eq!(oversize.drop_rate, 1.0, "size 8 cannot fit 4 slots");
        let ok = stats.per_size.iter().find(|s| s.size == 2).unwrap();
        assert!(ok.drop_rate > 0.0 && ok.drop_rate < 1.0);
        assert!(stats.mean_throughput > 0.0);
    }
}
