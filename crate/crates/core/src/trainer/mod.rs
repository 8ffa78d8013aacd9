//! Shared training machinery: schedules, return and size-value targets, and
//! the per-step communication round that both environments run.
//!
//! Everything here is on-policy and single-sample: one episode batch per
//! iteration, targets computed from that batch's own Monte-Carlo returns, no
//! replay and no target network.

mod pomnist;
mod traffic;

pub use pomnist::{PomnistSpec, PomnistTrainer};
pub use traffic::{TrafficSpec, TrafficTrainer};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    apply_kind, argmax_lowest, boltzmann_pick, codeword, delivery_weights, eps_greedy_pick,
    MessageKind, Mode, Model, SizeSet,
};
use crate::channel::{Channel, Message};
use crate::error::{Error, Result};
use crate::metrics::ChannelTally;
use crate::nn::params::Bound;
use crate::nn::tape::{BufId, Tape};

/// How agents pick message sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Learned size values with exploration during training.
    Adaptive,
    /// Always the single configured size.
    Fixed,
    /// Uniform over the size set, training and evaluation alike.
    Random,
    /// Size chosen like `Adaptive` but the payload is zeroed; the size flag
    /// still occupies the channel, isolating the cost signal from content.
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExploreKind {
    /// Softmax over size values at temperature eta.
    Boltzmann,
    /// Uniform with probability eps, else greedy.
    EpsGreedy,
}

/// Exploration magnitude: flat at `from` until `start`, geometric decay to
/// `to` at `end`, flat after. The value is a temperature or an epsilon
/// depending on `kind`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ExploreSchedule {
    pub kind: ExploreKind,
    pub from: f64,
    pub to: f64,
    pub start: u64,
    pub end: u64,
}

impl ExploreSchedule {
    pub fn standard() -> Self {
        ExploreSchedule { kind: ExploreKind::Boltzmann, from: 1.0, to: 0.01, start: 400, end: 1200 }
    }

    pub fn value_at(&self, iteration: u64) -> f64 {
        if iteration <= self.start {
            self.from
        } else if iteration >= self.end {
            self.to
        } else {
            let f = (iteration - self.start) as f64 / (self.end - self.start) as f64;
            self.from * (self.to / self.from).powf(f)
        }
    }
}

/// Linear ramp from `from` at iteration 0 to `to` at `over`, flat after.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub from: f64,
    pub to: f64,
    pub over: u64,
}

impl LinearSchedule {
    pub fn standard_entropy() -> Self {
        LinearSchedule { from: 2.0, to: 0.1, over: 1400 }
    }

    pub fn value_at(&self, iteration: u64) -> f64 {
        if self.over == 0 || iteration >= self.over {
            self.to
        } else {
            self.from + (self.to - self.from) * iteration as f64 / self.over as f64
        }
    }
}

/// Optimization schedule shared by both trainers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Schedule {
    pub iterations: u64,
    /// Parallel episodes per iteration (the batch size in episodes).
    pub n_envs: usize,
    pub gamma: f64,
    /// Joint-loss mix: alpha on the size loss, 1 - alpha on the action loss.
    pub alpha: f64,
    pub lr: f64,
    pub grad_clip: Option<f64>,
    pub explore: ExploreSchedule,
    pub entropy: LinearSchedule,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.n_envs == 0 {
            return Err(Error::config("schedule.n_envs", "need at least one environment"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("schedule.gamma", "discount outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("schedule.alpha", "loss mix outside [0, 1]"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("schedule.lr", "learning rate must be positive"));
        }
        if self.explore.from <= 0.0 || self.explore.to <= 0.0 {
            return Err(Error::config("schedule.explore", "exploration values must be positive"));
        }
        if self.explore.end < self.explore.start {
            return Err(Error::config("schedule.explore", "decay window ends before it starts"));
        }
        Ok(())
    }
}

/// One row of the per-iteration metric stream.
#[derive(Clone, Debug, Serialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub mean_return: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<f64>,
    pub loss_size: f64,
    pub loss_action: f64,
    pub drops_per_step: f64,
    pub throughput: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_msg_size: Option<f64>,
    /// Size choices this iteration, aligned with the size set.
    pub size_histogram: Vec<u64>,
    /// Temperature or epsilon, whichever the schedule drives.
    pub explore: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy_beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spawn_rate: Option<f64>,
}

/// Greedy evaluation summary over a test set or a bank of fresh episodes.
/// Carried in memory; reporting layers distill it before writing anything.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_return: f64,
    pub success_rate: Option<f64>,
    pub tally: ChannelTally,
    pub size_histogram: Vec<u64>,
    /// Message-action pairing counts for discrete kinds; absent otherwise.
    pub signaling: Option<crate::metrics::JointCountTable>,
    /// Listening probe counts; absent when the model keeps internal state.
    pub listening: Option<crate::metrics::ListeningCounts>,
}

/// Discounted suffix sums per row: G[t] = R[t] + gamma * G[t+1].
pub fn suffix_returns(rewards: &[Vec<f32>], gamma: f64) -> Vec<Vec<f32>> {
    let mut g = rewards.to_vec();
    let steps = g.len();
    for t in (0..steps.saturating_sub(1)).rev() {
        for r in 0..g[t].len() {
            let next = g[t + 1][r];
            g[t][r] += gamma as f32 * next;
        }
    }
    g
}

/// Size-value targets. At every step but the last, an agent's target is the
/// mean over the team of next-step returns with the agent's own next reward
/// removed, so perturbing R[t+1] of agent i leaves D[t] of agent i unchanged:
/// the reward enters the team sum once and is subtracted once. The final
/// step's target is zero.
pub fn size_targets(returns: &[Vec<f32>], rewards: &[Vec<f32>], n_agents: usize) -> Vec<Vec<f32>> {
    let steps = returns.len();
    assert_eq!(rewards.len(), steps);
    let rows = if steps == 0 { 0 } else { returns[0].len() };
    let n_envs = if n_agents == 0 { 0 } else { rows / n_agents };
    let mut d = vec![vec![0.0f32; rows]; steps];
    for t in 0..steps.saturating_sub(1) {
        for e in 0..n_envs {
            let base = e * n_agents;
            let team: f32 = (0..n_agents).map(|j| returns[t + 1][base + j]).sum();
            for i in 0..n_agents {
                d[t][base + i] = (team - rewards[t + 1][base + i]) / n_agents as f32;
            }
        }
    }
    d
}

/// One-hot agent identities, environment-major like every other row block.
pub(crate) fn agent_id_rows(t: &mut Tape<f32>, n_envs: usize, n_agents: usize) -> BufId {
    let mut data = vec![0.0f32; n_envs * n_agents * n_agents];
    for e in 0..n_envs {
        for i in 0..n_agents {
            data[(e * n_agents + i) * n_agents + i] = 1.0;
        }
    }
    t.constant(n_envs * n_agents, n_agents, data)
}

/// Draw source for per-row choices inside a communication round. Training
/// uses one shared exploration stream; evaluation hands each environment its
/// own stream so results cannot depend on how episodes are chunked.
pub(crate) enum RowRngs<'r> {
    Shared(&'r mut ChaCha8Rng),
    PerEnv(&'r mut [ChaCha8Rng]),
}

impl RowRngs<'_> {
    fn for_env(&mut self, env: usize) -> &mut ChaCha8Rng {
        match self {
            RowRngs::Shared(rng) => rng,
            RowRngs::PerEnv(rngs) => &mut rngs[env],
        }
    }
}

/// Static pieces of a communication round.
pub(crate) struct MessagingCtx<'a> {
    pub model: &'a Model<f32>,
    pub channel: &'a Channel,
    pub mode: SelectionMode,
    pub explore_kind: ExploreKind,
    /// Temperature or epsilon from the schedule; ignored when greedy.
    pub explore: f64,
    pub train: bool,
}

/// What one communication round leaves behind.
pub(crate) struct StepComms {
    /// Size value head output, rows x |size set|.
    pub size_vals: BufId,
    /// Slot-encoded outbound messages, rows x (max size + |size set|).
    pub msg_rows: BufId,
    /// Mean of delivered co-agent messages, same width as `msg_rows`.
    pub inbound: BufId,
    /// Size-set index chosen per row; -1 where no choice was made (inactive).
    pub chosen: Vec<i32>,
    /// Payload width actually offered to the channel; 0 means silence.
    pub sent_size: Vec<usize>,
    /// Codebook index per row for the codebook kind; -1 where unused.
    pub code_idx: Vec<i32>,
    /// Per-size codebook value heads, for the message-value loss; empty for
    /// payload kinds.
    pub q_heads: Vec<BufId>,
}

/// Run one communication round for every environment in the batch: pick
/// sizes, emit payloads, push the per-environment message sets through the
/// channel, and mix delivered rows into inbound features.
///
/// Draw order is fixed (sizes, then codewords, then payload noise, then the
/// channel) so replays are bit-stable. `active` masks rows that neither pick
/// nor send; absent means all rows live.
pub(crate) fn step_comms(
    t: &mut Tape<f32>,
    bound: &Bound,
    ctx: &MessagingCtx,
    x: BufId,
    active: Option<&[bool]>,
    size_rngs: &mut RowRngs<'_>,
    noise_rng: &mut ChaCha8Rng,
    chan_rngs: &mut [ChaCha8Rng],
    tally: &mut ChannelTally,
) -> StepComms {
    let cfg = &ctx.model.cfg;
    let n_agents = cfg.n_agents;
    let rows = t.rows(x);
    assert_eq!(rows % n_agents, 0);
    let n_envs = rows / n_agents;
    assert_eq!(chan_rngs.len(), n_envs);
    let sizes = &cfg.sizes;
    let k = sizes.len();

    let size_vals = ctx.model.size_values(t, bound, x);
    let vals = t.val(size_vals).to_vec();

    let mut chosen = vec![-1i32; rows];
    let mut sent_size = vec![0usize; rows];
    for r in 0..rows {
        if let Some(mask) = active {
            if !mask[r] {
                continue;
            }
        }
        let row = &vals[r * k..(r + 1) * k];
        let pick = match ctx.mode {
            SelectionMode::Fixed => 0,
            SelectionMode::Random => size_rngs.for_env(r / n_agents).gen_range(0..k),
            SelectionMode::Adaptive | SelectionMode::Zeros => {
                if !ctx.train {
                    argmax_lowest(row)
                } else {
                    let rng = size_rngs.for_env(r / n_agents);
                    match ctx.explore_kind {
                        ExploreKind::Boltzmann => boltzmann_pick(row, ctx.explore, rng),
                        ExploreKind::EpsGreedy => eps_greedy_pick(row, ctx.explore, rng),
                    }
                }
            }
        };
        chosen[r] = pick as i32;
        sent_size[r] = sizes.as_slice()[pick];
    }

    let max_w = sizes.max_size();
    let mut code_idx = vec![-1i32; rows];
    let mut q_heads = Vec::new();
    let mut heads = Vec::new();
    let mut choice = vec![-1i32; rows];
    if !sizes.nonzero().is_empty() && ctx.mode != SelectionMode::Zeros {
        let enc = ctx.model.encoder_outputs(t, bound, x);
        if cfg.kind == MessageKind::QValues {
            // Codeword selection is off-tape: pick the argmax (or explore)
            // entry of the chosen size's value head and emit its bit pattern
            // as a constant payload; the head itself trains through the
            // message-value loss, not through the payload.
            let head_vals: Vec<Vec<f32>> = enc.iter().map(|&h| t.val(h).to_vec()).collect();
            let mut payload = vec![0.0f32; rows * max_w];
            for r in 0..rows {
                if sent_size[r] == 0 {
                    continue;
                }
                let kk = sizes.nonzero_index(sent_size[r]).unwrap();
                let w = 1usize << sent_size[r];
                let row = &head_vals[kk][r * w..(r + 1) * w];
                let ci = if ctx.train {
                    eps_greedy_pick(row, ctx.explore, size_rngs.for_env(r / n_agents))
                } else {
                    argmax_lowest(row)
                };
                code_idx[r] = ci as i32;
                for (j, b) in codeword::<f32>(ci, sent_size[r]).into_iter().enumerate() {
                    payload[r * max_w + j] = b;
                }
                choice[r] = 0;
            }
            heads.push(t.constant(rows, max_w, payload));
            q_heads = enc;
        } else {
            let mode = if ctx.train { Mode::Train } else { Mode::Eval };
            for &h in &enc {
                heads.push(apply_kind(t, h, cfg.kind, mode, noise_rng));
            }
            for r in 0..rows {
                if sent_size[r] > 0 {
                    choice[r] = sizes.nonzero_index(sent_size[r]).unwrap() as i32;
                }
            }
        }
    }
    // Zeroed-payload mode: the slot flag below still marks the chosen size
    // while every payload column stays zero.
    let mut slot = vec![-1i32; rows];
    for r in 0..rows {
        if sent_size[r] > 0 {
            slot[r] = chosen[r];
        }
    }
    let msg_rows = t.assemble_messages(&heads, &choice, &slot, max_w, k);

    let msg_vals = t.val(msg_rows).to_vec();
    let width = sizes.msg_features();
    let mut delivered: Vec<Vec<usize>> = vec![Vec::new(); n_envs];
    for e in 0..n_envs {
        let mut messages = Vec::new();
        for i in 0..n_agents {
            let r = e * n_agents + i;
            if sent_size[r] > 0 {
                let payload = msg_vals[r * width..r * width + sent_size[r]].to_vec();
                messages.push(Message { sender: i, payload });
            }
        }
        let outcome = ctx.channel.step(messages, &mut chan_rngs[e]);
        tally.add_outcome(&outcome);
        delivered[e] = outcome.delivered.iter().map(|d| d.message.sender).collect();
    }
    let weights = delivery_weights::<f32>(&delivered, n_agents);
    let inbound = t.block_row_mix(msg_rows, n_agents, &weights);

    StepComms { size_vals, msg_rows, inbound, chosen, sent_size, code_idx, q_heads }
}

/// Squared error of the chosen size's value against the step target, summed
/// over rows that made a choice. Returns the sum and that row count.
pub(crate) fn size_value_terms(
    t: &mut Tape<f32>,
    comms: &StepComms,
    targets: &[f32],
) -> Option<(BufId, usize)> {
    let rows = comms.chosen.len();
    let mut idx = vec![0u32; rows];
    let mut mask = vec![0.0f32; rows];
    let mut count = 0usize;
    for r in 0..rows {
        if comms.chosen[r] >= 0 {
            idx[r] = comms.chosen[r] as u32;
            mask[r] = 1.0;
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    let q = t.gather_cols(comms.size_vals, &idx);
    let d = t.constant(rows, 1, targets.to_vec());
    let diff = t.sub(q, d);
    let sq = t.mul(diff, diff);
    let masked = t.row_scale(sq, &mask);
    Some((t.sum_all(masked), count))
}

/// Squared error of the chosen codeword's value against the same step target,
/// summed over rows that sent; codebook kind only.
pub(crate) fn codeword_value_terms(
    t: &mut Tape<f32>,
    comms: &StepComms,
    sizes: &SizeSet,
    targets: &[f32],
) -> Option<(BufId, usize)> {
    if comms.q_heads.is_empty() {
        return None;
    }
    let rows = comms.chosen.len();
    let mut total: Option<BufId> = None;
    let mut count = 0usize;
    for (kk, &head) in comms.q_heads.iter().enumerate() {
        let phi = sizes.nonzero()[kk];
        let mut idx = vec![0u32; rows];
        let mut mask = vec![0.0f32; rows];
        let mut any = false;
        for r in 0..rows {
            if comms.sent_size[r] == phi {
                idx[r] = comms.code_idx[r] as u32;
                mask[r] = 1.0;
                any = true;
                count += 1;
            }
        }
        if !any {
            continue;
        }
        let q = t.gather_cols(head, &idx);
        let d = t.constant(rows, 1, targets.to_vec());
        let diff = t.sub(q, d);
        let sq = t.mul(diff, diff);
        let masked = t.row_scale(sq, &mask);
        let s = t.sum_all(masked);
        total = Some(match total {
            Some(acc) => t.add(acc, s),
            None => s,
        });
    }
    total.map(|b| (b, count))
}

/// Running sum of loss terms that divides through by the contributing count.
pub(crate) struct TermAcc {
    total: Option<BufId>,
    count: usize,
}

impl TermAcc {
    pub fn new() -> Self {
        TermAcc { total: None, count: 0 }
    }

    pub fn push(&mut self, t: &mut Tape<f32>, term: Option<(BufId, usize)>) {
        if let Some((sum, c)) = term {
            self.total = Some(match self.total {
                Some(acc) => t.add(acc, sum),
                None => sum,
            });
            self.count += c;
        }
    }

    /// Mean over contributions, or a zero constant when nothing contributed.
    pub fn mean(self, t: &mut Tape<f32>) -> BufId {
        match self.total {
            Some(acc) => t.scale(acc, 1.0 / self.count as f32),
            None => t.zeros(1, 1),
        }
    }
}
