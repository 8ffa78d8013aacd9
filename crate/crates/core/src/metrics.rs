//! Evaluation metrics over logged rollout data: channel occupancy tallies and
//! the discrete action/message dependence measures derived from them.
//!
//! Everything here is a pure function of recorded counts; nothing touches the
//! network or the environments.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::agent::SizeSet;
use crate::channel::ChannelOutcome;
use crate::error::{Error, Result};

/// Running totals over channel outcomes. One outcome is one environment
/// instance advancing one step, so the per-step means below are per
/// environment-step.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ChannelTally {
    pub env_steps: u64,
    pub dropped: u64,
    pub occupied_slots: u64,
    /// Nonzero-size messages handed to the channel, delivered or not.
    pub sent: u64,
    /// Total payload slots of those messages.
    pub sent_slots: u64,
}

impl ChannelTally {
    pub fn add_outcome(&mut self, o: &ChannelOutcome) {
        self.env_steps += 1;
        self.dropped += o.dropped.len() as u64;
        self.occupied_slots += o.occupied_slots as u64;
        self.sent += (o.delivered.len() + o.dropped.len()) as u64;
        let slots: usize = o.delivered.iter().map(|d| d.message.size()).sum::<usize>()
            + o.dropped.iter().map(|d| d.message.size()).sum::<usize>();
        self.sent_slots += slots as u64;
    }

    pub fn merge(&mut self, other: &ChannelTally) {
        self.env_steps += other.env_steps;
        self.dropped += other.dropped;
        self.occupied_slots += other.occupied_slots;
        self.sent += other.sent;
        self.sent_slots += other.sent_slots;
    }

    pub fn drops_per_step(&self) -> f64 {
        if self.env_steps == 0 {
            return 0.0;
        }
        self.dropped as f64 / self.env_steps as f64
    }

    /// Mean slots per step occupied by delivered messages.
    pub fn throughput(&self) -> f64 {
        if self.env_steps == 0 {
            return 0.0;
        }
        self.occupied_slots as f64 / self.env_steps as f64
    }

    /// Mean size over sent nonzero-size messages; absent when none were sent.
    pub fn mean_msg_size(&self) -> Option<f64> {
        (self.sent > 0).then(|| self.sent_slots as f64 / self.sent as f64)
    }
}

/// A discrete payload as recorded for dependence measures: one 0/1 entry per
/// payload slot. Continuous payloads are never recorded.
pub type PayloadKey = Vec<u8>;

/// Joint (action, size, payload) counts from one evaluation. Tables are kept
/// per nonzero size; silence (size 0, or nothing sent) only feeds the size
/// distribution.
#[derive(Clone, Debug)]
pub struct JointCountTable {
    pub sizes: SizeSet,
    /// One contingency table per entry of `sizes.nonzero()`, keyed by
    /// (action, payload).
    pub by_size: Vec<BTreeMap<(u16, PayloadKey), u64>>,
    pub silent: u64,
    pub total: u64,
}

impl JointCountTable {
    pub fn new(sizes: SizeSet) -> Self {
        let n = sizes.nonzero().len();
        JointCountTable { sizes, by_size: vec![BTreeMap::new(); n], silent: 0, total: 0 }
    }

    pub fn record(&mut self, action: u16, size: usize, payload: PayloadKey) {
        let k = self.sizes.nonzero_index(size).expect("recorded size must be a nonzero member");
        assert_eq!(payload.len(), size, "payload entries match the declared size");
        *self.by_size[k].entry((action, payload)).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn record_silent(&mut self) {
        self.silent += 1;
        self.total += 1;
    }
}

fn entropy_of(counts: impl Iterator<Item = u64>, total: u64) -> f64 {
    let t = total as f64;
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / t;
            -p * p.log2()
        })
        .sum()
}

/// Marginal entropies (H(A), H(M)) of one contingency table, in bits.
pub fn marginal_entropies(table: &BTreeMap<(u16, PayloadKey), u64>) -> (f64, f64) {
    let total: u64 = table.values().sum();
    if total == 0 {
        return (0.0, 0.0);
    }
    let mut by_action: BTreeMap<u16, u64> = BTreeMap::new();
    let mut by_msg: BTreeMap<&PayloadKey, u64> = BTreeMap::new();
    for ((a, m), &c) in table {
        *by_action.entry(*a).or_insert(0) += c;
        *by_msg.entry(m).or_insert(0) += c;
    }
    (
        entropy_of(by_action.into_values(), total),
        entropy_of(by_msg.into_values(), total),
    )
}

/// I(A; M) in bits, computed as H(A) + H(M) - H(A, M). An empty table carries
/// no information.
pub fn mutual_information(table: &BTreeMap<(u16, PayloadKey), u64>) -> f64 {
    let total: u64 = table.values().sum();
    if total == 0 {
        return 0.0;
    }
    let (ha, hm) = marginal_entropies(table);
    let hj = entropy_of(table.values().copied(), total);
    ha + hm - hj
}

/// Size-weighted normalized dependence between actions and sent messages.
///
/// Each nonzero size contributes its share of the nonzero traffic times
/// I/min(H(A), H(M)); a term whose min-entropy is zero contributes nothing
/// (a constant can signal nothing). Absent when no nonzero-size message was
/// ever sent.
pub fn positive_signaling(t: &JointCountTable) -> Option<f64> {
    if t.total == 0 || t.silent == t.total {
        return None;
    }
    let nonzero_total = (t.total - t.silent) as f64;
    let mut ps = 0.0;
    for table in &t.by_size {
        let n: u64 = table.values().sum();
        if n == 0 {
            continue;
        }
        let weight = n as f64 / nonzero_total;
        let (ha, hm) = marginal_entropies(table);
        let floor = ha.min(hm);
        if floor > 0.0 {
            ps += weight * (mutual_information(table) / floor).clamp(0.0, 1.0);
        }
    }
    Some(ps)
}

/// Wrong-then-corrected decision counts over agent-episodes: the decision
/// before any message arrived versus the final one.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct ListeningCounts {
    pub corrected: u64,
    pub total: u64,
}

impl ListeningCounts {
    pub fn add(&mut self, first_correct: bool, last_correct: bool) {
        self.total += 1;
        if !first_correct && last_correct {
            self.corrected += 1;
        }
    }
}

/// Rate at which inbound messages flip a wrong preliminary decision to a
/// correct one. Defined only for models whose first decision is message-free
/// and stateless: a recurrent core is rejected, and a size set without the
/// silent option reports absent.
pub fn positive_listening(
    recurrent: bool,
    sizes: &SizeSet,
    counts: &ListeningCounts,
) -> Result<Option<f64>> {
    if recurrent {
        return Err(Error::config(
            "model.recurrent",
            "listening rate requires agents without internal state",
        ));
    }
    if !sizes.has_zero() || counts.total == 0 {
        return Ok(None);
    }
    Ok(Some(counts.corrected as f64 / counts.total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::channel::{drop_stats_monte_carlo, Channel, Delivered, DroppedMsg, DropCause, Message, Variant};
    use crate::rng::{stream, Stream};

    fn table(entries: &[((u16, &[u8]), u64)]) -> BTreeMap<(u16, PayloadKey), u64> {
        entries.iter().map(|((a, m), c)| ((*a, m.to_vec()), *c)).collect()
    }

    /// Direct double-sum definition, the independent oracle for the entropy
    /// route used by the implementation.
    fn mi_double_sum(t: &BTreeMap<(u16, PayloadKey), u64>) -> f64 {
        let total: u64 = t.values().sum();
        if total == 0 {
            return 0.0;
        }
        let n = total as f64;
        let mut pa: BTreeMap<u16, f64> = BTreeMap::new();
        let mut pm: BTreeMap<PayloadKey, f64> = BTreeMap::new();
        for ((a, m), &c) in t {
            *pa.entry(*a).or_insert(0.0) += c as f64 / n;
            *pm.entry(m.clone()).or_insert(0.0) += c as f64 / n;
        }
        t.iter()
            .filter(|(_, &c)| c > 0)
            .map(|((a, m), &c)| {
                let pj = c as f64 / n;
                pj * (pj / (pa[a] * pm[m])).log2()
            })
            .sum()
    }

    #[test]
    fn independent_uniform_table_has_no_information() {
        let t = table(&[((0, &[0]), 5), ((0, &[1]), 5), ((1, &[0]), 5), ((1, &[1]), 5)]);
        assert!(mutual_information(&t).abs() < 1e-12);
    }

    #[test]
    fn identity_pairing_of_two_symbols_is_one_bit() {
        let t = table(&[((0, &[0]), 7), ((1, &[1]), 7)]);
        assert!((mutual_information(&t) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_route_matches_double_sum_on_random_tables() {
        let mut rng = stream(11, Stream::SampleDraw);
        for _ in 0..100 {
            let na = rng.gen_range(2..5);
            let nm = rng.gen_range(2..6);
            let mut t = BTreeMap::new();
            for a in 0..na {
                for m in 0..nm {
                    let c = rng.gen_range(0..40u64);
                    if c > 0 {
                        t.insert((a as u16, vec![m as u8]), c);
                    }
                }
            }
            let got = mutual_information(&t);
            let want = mi_double_sum(&t);
            assert!((got - want).abs() < 1e-12, "got {got}, oracle {want}");
            let (ha, hm) = marginal_entropies(&t);
            assert!(got >= -1e-12 && got <= ha.min(hm) + 1e-9, "bounds violated");
        }
    }

    fn sizes(s: &[usize]) -> SizeSet {
        SizeSet::new(s.to_vec()).unwrap()
    }

    #[test]
    fn deterministic_pairing_signals_perfectly() {
        let mut j = JointCountTable::new(sizes(&[0, 1, 2]));
        for _ in 0..6 {
            j.record_silent();
        }
        for (a, m) in [(0u16, vec![0u8]), (1, vec![1])] {
            for _ in 0..5 {
                j.record(a, 1, m.clone());
            }
        }
        for (a, m) in [(2u16, vec![0u8, 0]), (3, vec![1, 1])] {
            for _ in 0..4 {
                j.record(a, 2, m.clone());
            }
        }
        let ps = positive_signaling(&j).unwrap();
        assert!((ps - 1.0).abs() < 1e-12, "ps {ps}");
    }

    #[test]
    fn independent_messages_signal_nothing() {
        let mut j = JointCountTable::new(sizes(&[0, 1]));
        for a in 0..2u16 {
            for m in 0..2u8 {
                for _ in 0..9 {
                    j.record(a, 1, vec![m]);
                }
            }
        }
        let ps = positive_signaling(&j).unwrap();
        assert!(ps.abs() < 1e-12, "ps {ps}");
    }

    #[test]
    fn signaling_is_invariant_under_relabeling() {
        let build = |swap: bool| {
            let mut j = JointCountTable::new(sizes(&[0, 1]));
            j.record_silent();
            let f = |a: u16| if swap { 1 - a } else { a };
            for _ in 0..8 {
                j.record(f(0), 1, vec![0]);
                j.record(f(1), 1, vec![1]);
            }
            for _ in 0..3 {
                j.record(f(0), 1, vec![1]);
            }
            positive_signaling(&j).unwrap()
        };
        assert!((build(false) - build(true)).abs() < 1e-12);
    }

    #[test]
    fn constant_traffic_at_a_size_contributes_zero() {
        // one action, one message value: min-entropy 0, ratio defined as 0
        let mut j = JointCountTable::new(sizes(&[0, 1]));
        j.record_silent();
        for _ in 0..10 {
            j.record(3, 1, vec![1]);
        }
        assert_eq!(positive_signaling(&j), Some(0.0));
    }

    #[test]
    fn signaling_absent_without_nonzero_messages() {
        let mut j = JointCountTable::new(sizes(&[0, 4]));
        assert_eq!(positive_signaling(&j), None);
        j.record_silent();
        assert_eq!(positive_signaling(&j), None);
    }

    #[test]
    fn listening_rate_and_its_preconditions() {
        let mut c = ListeningCounts::default();
        c.add(false, true);
        c.add(false, false);
        c.add(true, true);
        c.add(false, true);
        let rate = positive_listening(false, &sizes(&[0, 2]), &c).unwrap().unwrap();
        assert!((rate - 0.5).abs() < 1e-12);

        let err = positive_listening(true, &sizes(&[0, 2]), &c).unwrap_err();
        assert!(err.to_string().contains("internal state"), "{err}");

        assert_eq!(positive_listening(false, &sizes(&[2]), &c).unwrap(), None);
    }

    #[test]
    fn unchanged_decisions_never_count_as_listening() {
        let mut c = ListeningCounts::default();
        for correct in [true, false, true, false] {
            c.add(correct, correct);
        }
        let rate = positive_listening(false, &sizes(&[0, 1]), &c).unwrap().unwrap();
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn tally_means_from_synthetic_outcomes() {
        let msg = |sender, len| Message { sender, payload: vec![0.5; len] };
        let mut t = ChannelTally::default();
        t.add_outcome(&ChannelOutcome {
            delivered: vec![
                Delivered { message: msg(0, 4), start: 0 },
                Delivered { message: msg(1, 2), start: 4 },
            ],
            dropped: vec![DroppedMsg { message: msg(2, 4), start: None, cause: DropCause::Oversize }],
            occupied_slots: 6,
        });
        t.add_outcome(&ChannelOutcome::default());
        assert_eq!(t.env_steps, 2);
        assert!((t.throughput() - 3.0).abs() < 1e-12);
        assert!((t.drops_per_step() - 0.5).abs() < 1e-12);
        assert!((t.mean_msg_size().unwrap() - 10.0 / 3.0).abs() < 1e-12);

        let empty = ChannelTally::default();
        assert_eq!(empty.mean_msg_size(), None);
        assert_eq!(empty.throughput(), 0.0);
    }

    #[test]
    fn tally_agrees_with_the_channel_monte_carlo() {
        // same channel, same size menu: the tally over manual steps must land
        // on the dedicated estimator's throughput within Monte-Carlo noise
        let chan = Channel::slotted(8, Variant::Spacing);
        let sizes = [0usize, 1, 2, 4];
        let steps = 200_000;
        let stats = drop_stats_monte_carlo(&chan, &sizes, 4, steps, &mut stream(5, Stream::EnvChannel(0)));

        let mut rng = stream(77, Stream::EnvChannel(1));
        let mut tally = ChannelTally::default();
        for _ in 0..steps {
            let mut msgs = Vec::new();
            for agent in 0..4 {
                let s = sizes[rng.gen_range(0..sizes.len())];
                if s > 0 {
                    msgs.push(Message { sender: agent, payload: vec![0.0; s] });
                }
            }
            tally.add_outcome(&chan.step(msgs, &mut rng));
        }
        let diff = (tally.throughput() - stats.mean_throughput).abs();
        assert!(diff < 0.02, "tally {} vs estimator {}", tally.throughput(), stats.mean_throughput);
    }
}
