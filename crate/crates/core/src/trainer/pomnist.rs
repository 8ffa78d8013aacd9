//! Digit trainer: each agent sees one crop, the team exchanges one round of
//! messages, and every agent predicts the digit on the second step.
//!
//! Step 0 has no environment action and no reward; its message is the only
//! thing that matters. Step 1 receives whatever the channel delivered and
//! predicts. The action head is trained at the prediction step only.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::agent::{
    argmax_lowest, eps_greedy_pick, ActionSelector, MessageKind, Model, ModelConfig, ObsEncoder,
    SizeSet, TRAIN_ACTION_EPS,
};
use crate::channel::Channel;
use crate::env::pomnist::{PomnistBatch, ViewAssignment};
use crate::error::{Error, Result};
use crate::metrics::{ChannelTally, JointCountTable, ListeningCounts};
use crate::mnist::Partition;
use crate::nn::checkpoint;
use crate::nn::optim::{clip_global_norm, Adam};
use crate::nn::params::Bound;
use crate::nn::tape::{BufId, Tape};
use crate::rng::{stream, Stream};

use super::{
    agent_id_rows, codeword_value_terms, size_targets, size_value_terms, step_comms,
    suffix_returns, EvalReport, ExploreKind, IterationMetrics, MessagingCtx, RowRngs, Schedule,
    SelectionMode, StepComms, TermAcc,
};

const N_DIGITS: usize = 10;

/// Everything needed to build a digit trainer.
#[derive(Clone, Debug)]
pub struct PomnistSpec {
    /// Vertical and horizontal cut counts; agents = (v + 1) * (h + 1).
    pub v: usize,
    pub h: usize,
    pub sizes: SizeSet,
    pub kind: MessageKind,
    pub mode: SelectionMode,
    pub channel: Channel,
    pub schedule: Schedule,
    pub seed: u64,
}

pub struct PomnistTrainer {
    pub model: Model<f32>,
    pub assignment: ViewAssignment,
    pub channel: Channel,
    pub mode: SelectionMode,
    pub schedule: Schedule,
    pub iteration: u64,
    adam: Adam<f32>,
    seed: u64,
    sample_rng: ChaCha8Rng,
    size_rng: ChaCha8Rng,
    action_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    chan_rngs: Vec<ChaCha8Rng>,
}

/// Mutable draw sources for one episode; split out so the trainer can lend
/// its fields disjointly.
struct EpisodeRngs<'r> {
    size: RowRngs<'r>,
    action: &'r mut ChaCha8Rng,
    dropout: Option<&'r mut ChaCha8Rng>,
    noise: &'r mut ChaCha8Rng,
    chans: &'r mut [ChaCha8Rng],
}

struct Episode {
    comms: [StepComms; 2],
    scores1: BufId,
    actions: Vec<usize>,
    rewards1: Vec<f32>,
    /// Greedy step-0 digits, collected only when the listening probe asks.
    step0_preds: Option<Vec<usize>>,
}

/// Run the two-step episode on the tape. The observation features are
/// computed once and reused for both steps: the crop does not change, so a
/// second conv pass would only recompute the same values (and under dropout
/// would decorrelate the two steps' view of the same input).
#[allow(clippy::too_many_arguments)]
fn run_episode(
    model: &Model<f32>,
    channel: &Channel,
    mode: SelectionMode,
    explore_kind: ExploreKind,
    explore: f64,
    batch: &PomnistBatch,
    train: bool,
    t: &mut Tape<f32>,
    bound: &Bound,
    mut rngs: EpisodeRngs<'_>,
    tally: &mut ChannelTally,
    want_step0: bool,
) -> Result<Episode> {
    let rows = batch.obs_rows();
    let obs = t.constant(rows, batch.view_len(), batch.views.clone());
    let feat = model.obs_features(t, bound, obs, rngs.dropout);
    let ids = agent_id_rows(t, batch.n_envs, batch.n_agents);
    let silent = t.zeros(rows, model.cfg.sizes.msg_features());
    let x0 = model.core_output(t, bound, feat, silent, Some(ids), None);
    let ctx = MessagingCtx { model, channel, mode, explore_kind, explore, train };
    let comms0 =
        step_comms(t, bound, &ctx, x0, None, &mut rngs.size, rngs.noise, rngs.chans, tally);
    let x1 = model.core_output(t, bound, feat, comms0.inbound, Some(ids), None);
    // The final step still talks; those messages contend for the channel like
    // any others even though nothing can hear them afterwards.
    let comms1 =
        step_comms(t, bound, &ctx, x1, None, &mut rngs.size, rngs.noise, rngs.chans, tally);
    let scores1 = model.action_scores(t, bound, x1);

    let step0_preds = if want_step0 {
        let s0 = model.action_scores(t, bound, x0);
        let v = t.val(s0);
        Some((0..rows).map(|r| argmax_lowest(&v[r * N_DIGITS..(r + 1) * N_DIGITS])).collect())
    } else {
        None
    };

    let sv = t.val(scores1).to_vec();
    let actions: Vec<usize> = (0..rows)
        .map(|r| {
            let row = &sv[r * N_DIGITS..(r + 1) * N_DIGITS];
            if train {
                eps_greedy_pick(row, TRAIN_ACTION_EPS, rngs.action)
            } else {
                argmax_lowest(row)
            }
        })
        .collect();
    let rewards1 = batch.rewards(&actions)?;
    Ok(Episode { comms: [comms0, comms1], scores1, actions, rewards1, step0_preds })
}

impl PomnistTrainer {
    pub fn new(spec: PomnistSpec) -> Result<Self> {
        spec.schedule.validate()?;
        let assignment = ViewAssignment::new(spec.v, spec.h);
        let cfg = ModelConfig {
            n_agents: assignment.n_agents(),
            obs: ObsEncoder::Conv { h: assignment.view_rows, w: assignment.view_cols },
            include_agent_id: true,
            recurrent: false,
            sizes: spec.sizes,
            kind: spec.kind,
            selector: ActionSelector::QGreedy,
            n_actions: N_DIGITS,
        };
        let mut init_rng = stream(spec.seed, Stream::ParamInit);
        let model = Model::init(cfg, &mut init_rng)?;
        let adam = Adam::new(&model.params, spec.schedule.lr);
        let chan_rngs = (0..spec.schedule.n_envs)
            .map(|k| stream(spec.seed, Stream::EnvChannel(k as u64)))
            .collect();
        Ok(PomnistTrainer {
            model,
            assignment,
            channel: spec.channel,
            mode: spec.mode,
            iteration: 0,
            adam,
            seed: spec.seed,
            sample_rng: stream(spec.seed, Stream::SampleDraw),
            size_rng: stream(spec.seed, Stream::SizeExploration),
            action_rng: stream(spec.seed, Stream::ActionExploration),
            dropout_rng: stream(spec.seed, Stream::Dropout),
            noise_rng: stream(spec.seed, Stream::MessageNoise),
            chan_rngs,
            schedule: spec.schedule,
        })
    }

    pub fn save_params(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.model.params, path)
    }

    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let loaded = checkpoint::load(path)?;
        checkpoint::restore(&mut self.model.params, loaded)
    }

    /// One batch of episodes, one optimizer step.
    pub fn train_iteration(&mut self, train: &Partition) -> Result<IterationMetrics> {
        let explore = self.schedule.explore.value_at(self.iteration);
        let gamma = self.schedule.gamma;
        let alpha = self.schedule.alpha as f32;
        let grad_clip = self.schedule.grad_clip;
        let batch =
            PomnistBatch::sample(train, &self.assignment, self.schedule.n_envs, &mut self.sample_rng)?;
        let rows = batch.obs_rows();

        let mut t = Tape::new();
        let bound = self.model.params.bind(&mut t);
        let mut tally = ChannelTally::default();
        let Self {
            model,
            channel,
            mode,
            schedule,
            size_rng,
            action_rng,
            dropout_rng,
            noise_rng,
            chan_rngs,
            ..
        } = &mut *self;
        let ep = run_episode(
            model,
            channel,
            *mode,
            schedule.explore.kind,
            explore,
            &batch,
            true,
            &mut t,
            &bound,
            EpisodeRngs {
                size: RowRngs::Shared(size_rng),
                action: action_rng,
                dropout: Some(dropout_rng),
                noise: noise_rng,
                chans: chan_rngs,
            },
            &mut tally,
            false,
        )?;

        let rewards = vec![vec![0.0f32; rows], ep.rewards1.clone()];
        let returns = suffix_returns(&rewards, gamma);
        let targets = size_targets(&returns, &rewards, batch.n_agents);

        let mut size_acc = TermAcc::new();
        let mut code_acc = TermAcc::new();
        for (s, comms) in ep.comms.iter().enumerate() {
            let term = size_value_terms(&mut t, comms, &targets[s]);
            size_acc.push(&mut t, term);
            let term = codeword_value_terms(&mut t, comms, &model.cfg.sizes, &targets[s]);
            code_acc.push(&mut t, term);
        }
        let l_size = size_acc.mean(&mut t);
        let l_phi = if model.cfg.kind == MessageKind::QValues {
            let l_code = code_acc.mean(&mut t);
            t.add(l_size, l_code)
        } else {
            l_size
        };

        let idx: Vec<u32> = ep.actions.iter().map(|&a| a as u32).collect();
        let qa = t.gather_cols(ep.scores1, &idx);
        let g1 = t.constant(rows, 1, returns[1].clone());
        let diff = t.sub(qa, g1);
        let sq = t.mul(diff, diff);
        let l_act = t.mean_all(sq);

        let sphi = t.scale(l_phi, alpha);
        let spi = t.scale(l_act, 1.0 - alpha);
        let joint = t.add(sphi, spi);

        let loss_size = t.val(l_phi)[0] as f64;
        let loss_action = t.val(l_act)[0] as f64;
        let jv = t.val(joint)[0];
        if !jv.is_finite() {
            return Err(Error::NonFinite {
                name: "joint loss".into(),
                context: format!("iteration {}", self.iteration),
            });
        }

        let grads = t.backward(joint);
        let views = bound.grads(&grads);
        match grad_clip {
            Some(c) => {
                let mut owned: Vec<Option<Vec<f32>>> =
                    views.iter().map(|o| o.map(|s| s.to_vec())).collect();
                clip_global_norm(&mut owned, c);
                let clipped: Vec<Option<&[f32]>> = owned.iter().map(|o| o.as_deref()).collect();
                self.adam.step(&mut self.model.params, &clipped)?;
            }
            None => self.adam.step(&mut self.model.params, &views)?,
        }

        let mean_return = returns[0].iter().map(|&x| x as f64).sum::<f64>() / rows as f64;
        let mut hist = vec![0u64; self.model.cfg.sizes.len()];
        for comms in &ep.comms {
            for &c in &comms.chosen {
                if c >= 0 {
                    hist[c as usize] += 1;
                }
            }
        }
        let metrics = IterationMetrics {
            iteration: self.iteration,
            mean_return,
            success_rate: None,
            loss_size,
            loss_action,
            drops_per_step: tally.drops_per_step(),
            throughput: tally.throughput(),
            mean_msg_size: tally.mean_msg_size(),
            size_histogram: hist,
            explore,
            entropy_beta: None,
            spawn_rate: None,
        };
        self.iteration += 1;
        Ok(metrics)
    }

    /// Greedy evaluation: one episode per test sample, walked in order in
    /// chunks. Message sizes take the lowest-index argmax, predictions are
    /// the greedy digit, and every chunk gets its own evaluation rng streams
    /// so results do not depend on chunking history.
    pub fn evaluate(&self, test: &Partition, episodes: usize, chunk: usize) -> Result<EvalReport> {
        assert!(chunk > 0);
        let episodes = episodes.min(test.count);
        let discrete = matches!(
            self.model.cfg.kind,
            MessageKind::PseudoGradient | MessageKind::Dru { .. } | MessageKind::QValues
        );
        let mut signaling = discrete.then(|| JointCountTable::new(self.model.cfg.sizes.clone()));
        let mut listening = ListeningCounts::default();
        let mut tally = ChannelTally::default();
        let mut hist = vec![0u64; self.model.cfg.sizes.len()];
        let mut sum_return = 0.0f64;
        let mut rows_total = 0usize;
        let mut correct = 0u64;
        let width = self.model.cfg.sizes.msg_features();

        let mut start = 0usize;
        let mut c = 0u64;
        while start < episodes {
            let n = chunk.min(episodes - start);
            let batch = PomnistBatch::exact(test, &self.assignment, start, n)?;
            let rows = batch.obs_rows();
            let mut t = Tape::new();
            let bound = self.model.params.bind(&mut t);
            // Streams keyed by global episode index, so any chunking of the
            // same walk consumes identical draws.
            let mut chans: Vec<ChaCha8Rng> = (0..n)
                .map(|j| stream(self.seed, Stream::Eval((start + j) as u64)))
                .collect();
            let mut size_rngs: Vec<ChaCha8Rng> = (0..n)
                .map(|j| stream(self.seed, Stream::Eval(3_000_000_000 + (start + j) as u64)))
                .collect();
            let mut action_rng = stream(self.seed, Stream::Eval(1_000_000_000 + c));
            let mut noise_rng = stream(self.seed, Stream::Eval(1_500_000_000 + c));
            let ep = run_episode(
                &self.model,
                &self.channel,
                self.mode,
                self.schedule.explore.kind,
                0.0,
                &batch,
                false,
                &mut t,
                &bound,
                EpisodeRngs {
                    size: RowRngs::PerEnv(&mut size_rngs),
                    action: &mut action_rng,
                    dropout: None,
                    noise: &mut noise_rng,
                    chans: &mut chans,
                },
                &mut tally,
                true,
            )?;

            let rewards = vec![vec![0.0f32; rows], ep.rewards1.clone()];
            let returns = suffix_returns(&rewards, self.schedule.gamma);
            sum_return += returns[0].iter().map(|&x| x as f64).sum::<f64>();
            rows_total += rows;

            let preds0 = ep.step0_preds.as_ref().unwrap();
            let msg0 = t.val(ep.comms[0].msg_rows);
            for r in 0..rows {
                let label = batch.labels[r / batch.n_agents] as usize;
                correct += u64::from(ep.actions[r] == label);
                listening.add(preds0[r] == label, ep.actions[r] == label);
                if let Some(table) = signaling.as_mut() {
                    // Pair each agent's step-0 message with its own step-1
                    // prediction; silence is counted so message frequencies
                    // weight the sizes correctly.
                    let phi = ep.comms[0].sent_size[r];
                    if phi > 0 {
                        let bits: Vec<u8> = (0..phi)
                            .map(|j| u8::from(msg0[r * width + j] > 0.0))
                            .collect();
                        table.record(ep.actions[r] as u16, phi, bits);
                    } else {
                        table.record_silent();
                    }
                }
            }
            for comms in &ep.comms {
                for &ch in &comms.chosen {
                    if ch >= 0 {
                        hist[ch as usize] += 1;
                    }
                }
            }
            start += n;
            c += 1;
        }

        Ok(EvalReport {
            episodes,
            mean_return: sum_return / rows_total.max(1) as f64,
            success_rate: Some(100.0 * correct as f64 / rows_total.max(1) as f64),
            tally,
            size_histogram: hist,
            signaling,
            listening: Some(listening),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Variant;
    use crate::mnist::Dataset;
    use crate::trainer::{ExploreSchedule, LinearSchedule};

    fn fixture() -> Dataset {
        Dataset::load(Path::new("../../data/fixtures/mini-mnist")).unwrap()
    }

    fn schedule(n_envs: usize) -> Schedule {
        Schedule {
            iterations: 3,
            n_envs,
            gamma: 1.0,
            alpha: 0.5,
            lr: 1e-3,
            grad_clip: None,
            explore: ExploreSchedule::standard(),
            entropy: LinearSchedule::standard_entropy(),
        }
    }

    fn spec(kind: MessageKind, sizes: Vec<usize>, mode: SelectionMode) -> PomnistSpec {
        PomnistSpec {
            v: 1,
            h: 1,
            sizes: SizeSet::new(sizes).unwrap(),
            kind,
            mode,
            channel: Channel::slotted(8, Variant::Spacing),
            schedule: schedule(16),
            seed: 3,
        }
    }

    #[test]
    fn training_steps_run_and_report() {
        let data = fixture();
        let mut tr =
            PomnistTrainer::new(spec(MessageKind::Continuous, vec![0, 1, 2], SelectionMode::Adaptive))
                .unwrap();
        let m0 = tr.train_iteration(&data.train).unwrap();
        assert_eq!(m0.iteration, 0);
        assert!(m0.mean_return >= -1.0 && m0.mean_return <= 1.0);
        assert!(m0.loss_size.is_finite() && m0.loss_action.is_finite());
        assert_eq!(m0.size_histogram.iter().sum::<u64>(), 2 * 16 * 4);
        let m1 = tr.train_iteration(&data.train).unwrap();
        assert_eq!(m1.iteration, 1);
    }

    #[test]
    fn identical_seeds_reproduce_bitwise() {
        let data = fixture();
        let s = spec(MessageKind::Dru { sigma: 2.0 }, vec![0, 2, 4], SelectionMode::Adaptive);
        let mut a = PomnistTrainer::new(s.clone()).unwrap();
        let mut b = PomnistTrainer::new(s).unwrap();
        for _ in 0..2 {
            let ma = a.train_iteration(&data.train).unwrap();
            let mb = b.train_iteration(&data.train).unwrap();
            assert_eq!(ma.mean_return, mb.mean_return);
            assert_eq!(ma.loss_size, mb.loss_size);
            assert_eq!(ma.loss_action, mb.loss_action);
            assert_eq!(ma.size_histogram, mb.size_histogram);
        }
        for ((_, ta), (_, tb)) in a.model.params.iter().zip(b.model.params.iter()) {
            assert_eq!(ta.data, tb.data);
        }
    }

    #[test]
    fn evaluation_is_chunk_invariant() {
        let data = fixture();
        let tr =
            PomnistTrainer::new(spec(MessageKind::PseudoGradient, vec![0, 2], SelectionMode::Adaptive))
                .unwrap();
        let a = tr.evaluate(&data.test, 64, 64).unwrap();
        let b = tr.evaluate(&data.test, 64, 16).unwrap();
        assert_eq!(a.mean_return, b.mean_return);
        assert_eq!(a.size_histogram, b.size_histogram);
        assert_eq!(a.episodes, 64);
        let la = a.listening.unwrap();
        let lb = b.listening.unwrap();
        assert_eq!(la.corrected, lb.corrected);
        assert_eq!(la.total, lb.total);
    }

    #[test]
    fn codebook_kind_trains_and_evaluates() {
        let data = fixture();
        let mut tr = PomnistTrainer::new(spec(
            MessageKind::QValues,
            vec![0, 1, 2],
            SelectionMode::Adaptive,
        ))
        .unwrap();
        let m = tr.train_iteration(&data.train).unwrap();
        assert!(m.loss_size.is_finite());
        let rep = tr.evaluate(&data.test, 32, 16).unwrap();
        let table = rep.signaling.expect("codebook messages are discrete");
        assert_eq!(table.total, 32 * 4);
    }

    #[test]
    fn params_roundtrip_through_checkpoint() {
        let data = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        let mut tr =
            PomnistTrainer::new(spec(MessageKind::Continuous, vec![0, 1], SelectionMode::Adaptive))
                .unwrap();
        tr.train_iteration(&data.train).unwrap();
        tr.save_params(&path).unwrap();
        let before = tr.evaluate(&data.test, 32, 32).unwrap();
        tr.train_iteration(&data.train).unwrap();
        tr.load_params(&path).unwrap();
        let after = tr.evaluate(&data.test, 32, 32).unwrap();
        assert_eq!(before.mean_return, after.mean_return);
    }
}
