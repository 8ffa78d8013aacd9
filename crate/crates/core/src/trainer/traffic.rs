//! Junction trainer: five car slots, twenty steps, gas-or-brake actions from
//! a stochastic policy with a learned baseline, sizes from the same value
//! head machinery as the digit task.
//!
//! Inactive slots are carried as zero rows: their observations are zero,
//! their hidden state is masked to zero after every step, and they neither
//! pick sizes nor send. Messages sent at step t arrive as features at step
//! t + 1.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::agent::{
    softmax_sample, ActionSelector, MessageKind, Model, ModelConfig, ObsEncoder, SizeSet,
};
use crate::channel::Channel;
use crate::env::traffic::{
    curriculum_rate, success_rate, Action, Curriculum, TrafficEnv, EPISODE_STEPS, N_AGENTS,
    OBS_LEN,
};
use crate::error::{Error, Result};
use crate::metrics::{ChannelTally, JointCountTable};
use crate::nn::checkpoint;
use crate::nn::optim::{clip_global_norm, Adam};
use crate::nn::tape::{BufId, Tape};
use crate::rng::{stream, Stream};

use super::{
    codeword_value_terms, size_targets, size_value_terms, step_comms, suffix_returns, EvalReport,
    IterationMetrics, MessagingCtx, RowRngs, Schedule, SelectionMode, StepComms, TermAcc,
};

/// Action-head output order: column 0 accelerates, column 1 holds.
fn to_action(idx: usize) -> Action {
    if idx == 0 {
        Action::Gas
    } else {
        Action::Brake
    }
}

#[derive(Clone, Debug)]
pub struct TrafficSpec {
    pub sizes: SizeSet,
    pub kind: MessageKind,
    pub mode: SelectionMode,
    pub channel: Channel,
    pub schedule: Schedule,
    pub curriculum: Curriculum,
    pub seed: u64,
}

pub struct TrafficTrainer {
    pub model: Model<f32>,
    pub channel: Channel,
    pub mode: SelectionMode,
    pub schedule: Schedule,
    pub curriculum: Curriculum,
    pub iteration: u64,
    adam: Adam<f32>,
    seed: u64,
    envs: Vec<TrafficEnv>,
    size_rng: ChaCha8Rng,
    action_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    chan_rngs: Vec<ChaCha8Rng>,
}

/// What one rollout step leaves on the tape for the losses.
struct StepRec {
    comms: StepComms,
    logp: BufId,
    psm: BufId,
    value: BufId,
    actions: Vec<u32>,
    mask: Vec<f32>,
}

impl TrafficTrainer {
    pub fn new(spec: TrafficSpec) -> Result<Self> {
        spec.schedule.validate()?;
        let cfg = ModelConfig {
            n_agents: N_AGENTS,
            obs: ObsEncoder::Dense { input: OBS_LEN },
            include_agent_id: false,
            recurrent: true,
            sizes: spec.sizes,
            kind: spec.kind,
            selector: ActionSelector::Stochastic,
            n_actions: 2,
        };
        let mut init_rng = stream(spec.seed, Stream::ParamInit);
        let model = Model::init(cfg, &mut init_rng)?;
        let adam = Adam::new(&model.params, spec.schedule.lr);
        let envs = (0..spec.schedule.n_envs)
            .map(|k| TrafficEnv::new(stream(spec.seed, Stream::EnvDynamics(k as u64))))
            .collect();
        let chan_rngs = (0..spec.schedule.n_envs)
            .map(|k| stream(spec.seed, Stream::EnvChannel(k as u64)))
            .collect();
        Ok(TrafficTrainer {
            model,
            channel: spec.channel,
            mode: spec.mode,
            curriculum: spec.curriculum,
            iteration: 0,
            adam,
            seed: spec.seed,
            envs,
            size_rng: stream(spec.seed, Stream::SizeExploration),
            action_rng: stream(spec.seed, Stream::ActionExploration),
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

    /// One batch of full episodes, one optimizer step, gradients through the
    /// whole recurrence.
    pub fn train_iteration(&mut self) -> Result<IterationMetrics> {
        let explore = self.schedule.explore.value_at(self.iteration);
        let beta = self.schedule.entropy.value_at(self.iteration) as f32;
        let p = curriculum_rate(self.iteration, &self.curriculum);
        let gamma = self.schedule.gamma;
        let alpha = self.schedule.alpha as f32;
        let grad_clip = self.schedule.grad_clip;
        let n_envs = self.schedule.n_envs;
        let rows = n_envs * N_AGENTS;
        let l = self.model.cfg.l_core();
        let width = self.model.cfg.sizes.msg_features();

        let mut t = Tape::new();
        let bound = self.model.params.bind(&mut t);
        let mut tally = ChannelTally::default();
        let mut recs: Vec<StepRec> = Vec::with_capacity(EPISODE_STEPS);
        let mut rewards: Vec<Vec<f32>> = Vec::with_capacity(EPISODE_STEPS);

        {
            let Self {
                model,
                channel,
                mode,
                schedule,
                envs,
                size_rng,
                action_rng,
                noise_rng,
                chan_rngs,
                ..
            } = &mut *self;
            let ctx = MessagingCtx {
                model,
                channel,
                mode: *mode,
                explore_kind: schedule.explore.kind,
                explore,
                train: true,
            };
            for env in envs.iter_mut() {
                env.reset();
            }
            let mut hidden = t.zeros(rows, l);
            let mut inbound: Option<BufId> = None;

            for _ in 0..EPISODE_STEPS {
                for env in envs.iter_mut() {
                    env.spawn(p);
                }
                let mut active = vec![false; rows];
                let mut obs = vec![0.0f32; rows * OBS_LEN];
                for (e, env) in envs.iter().enumerate() {
                    for i in 0..N_AGENTS {
                        let r = e * N_AGENTS + i;
                        active[r] = env.is_active(i);
                        env.observe(i, &mut obs[r * OBS_LEN..(r + 1) * OBS_LEN]);
                    }
                }
                let mask: Vec<f32> = active.iter().map(|&a| f32::from(a)).collect();
                let obs_buf = t.constant(rows, OBS_LEN, obs);
                let feat = model.obs_features(&mut t, &bound, obs_buf, None::<&mut ChaCha8Rng>);
                let msg = match inbound {
                    Some(b) => b,
                    None => t.zeros(rows, width),
                };
                let x = model.core_output(&mut t, &bound, feat, msg, None, Some(hidden));
                // Mask before the state is carried or read: cars that left or
                // never arrived keep a zero hidden row.
                hidden = t.row_scale(x, &mask);
                let comms = step_comms(
                    &mut t,
                    &bound,
                    &ctx,
                    x,
                    Some(&active),
                    &mut RowRngs::Shared(size_rng),
                    noise_rng,
                    chan_rngs,
                    &mut tally,
                );
                inbound = Some(comms.inbound);
                let scores = model.action_scores(&mut t, &bound, x);
                let logp = t.log_softmax_rows(scores);
                let psm = t.softmax_rows(scores);
                let value = model.state_value(&mut t, &bound, x);

                let sv = t.val(scores).to_vec();
                let mut actions = vec![0u32; rows];
                let mut per_env = vec![[Action::Brake; N_AGENTS]; n_envs];
                for r in 0..rows {
                    if active[r] {
                        let a = softmax_sample(&sv[r * 2..(r + 1) * 2], action_rng);
                        actions[r] = a as u32;
                        per_env[r / N_AGENTS][r % N_AGENTS] = to_action(a);
                    }
                }
                let mut step_rewards = vec![0.0f32; rows];
                for (e, env) in envs.iter_mut().enumerate() {
                    let rs = env.apply(&per_env[e]);
                    step_rewards[e * N_AGENTS..(e + 1) * N_AGENTS].copy_from_slice(&rs);
                }
                rewards.push(step_rewards);
                recs.push(StepRec { comms, logp, psm, value, actions, mask });
            }
        }

        let returns = suffix_returns(&rewards, gamma);
        let targets = size_targets(&returns, &rewards, N_AGENTS);

        let mut size_acc = TermAcc::new();
        let mut code_acc = TermAcc::new();
        for (s, rec) in recs.iter().enumerate() {
            let term = size_value_terms(&mut t, &rec.comms, &targets[s]);
            size_acc.push(&mut t, term);
            let term = codeword_value_terms(&mut t, &rec.comms, &self.model.cfg.sizes, &targets[s]);
            code_acc.push(&mut t, term);
        }
        let l_size = size_acc.mean(&mut t);
        let l_phi = if self.model.cfg.kind == MessageKind::QValues {
            let l_code = code_acc.mean(&mut t);
            t.add(l_size, l_code)
        } else {
            l_size
        };

        // Policy gradient with the learned state value as a detached
        // baseline, value regression, and an entropy bonus, all masked to
        // active rows and averaged over active row-steps.
        let mut pi_acc: Option<BufId> = None;
        let mut active_total = 0usize;
        for (s, rec) in recs.iter().enumerate() {
            let vvals = t.val(rec.value).to_vec();
            let adv_neg: Vec<f32> = (0..rows)
                .map(|r| -(returns[s][r] - vvals[r]) * rec.mask[r])
                .collect();
            let lp = t.gather_cols(rec.logp, &rec.actions);
            let pol = t.row_scale(lp, &adv_neg);
            let pol_sum = t.sum_all(pol);

            let gconst = t.constant(rows, 1, returns[s].clone());
            let vd = t.sub(rec.value, gconst);
            let vsq = t.mul(vd, vd);
            let vmask = t.row_scale(vsq, &rec.mask);
            let v_sum = t.sum_all(vmask);

            let plp = t.mul(rec.psm, rec.logp);
            let negent = t.sum_cols(plp);
            let bmask: Vec<f32> = rec.mask.iter().map(|m| m * beta).collect();
            let e_rows = t.row_scale(negent, &bmask);
            let e_sum = t.sum_all(e_rows);

            let s1 = t.add(pol_sum, v_sum);
            let s2 = t.add(s1, e_sum);
            pi_acc = Some(match pi_acc {
                Some(acc) => t.add(acc, s2),
                None => s2,
            });
            active_total += rec.mask.iter().filter(|&&m| m > 0.0).count();
        }
        let l_pi = match pi_acc {
            Some(acc) => t.scale(acc, 1.0 / active_total.max(1) as f32),
            None => t.zeros(1, 1),
        };

        let sphi = t.scale(l_phi, alpha);
        let spi = t.scale(l_pi, 1.0 - alpha);
        let joint = t.add(sphi, spi);

        let loss_size = t.val(l_phi)[0] as f64;
        let loss_action = t.val(l_pi)[0] as f64;
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
        let crashes: Vec<bool> = self.envs.iter().map(|e| e.crashed()).collect();
        let mut hist = vec![0u64; self.model.cfg.sizes.len()];
        for rec in &recs {
            for &c in &rec.comms.chosen {
                if c >= 0 {
                    hist[c as usize] += 1;
                }
            }
        }
        let metrics = IterationMetrics {
            iteration: self.iteration,
            mean_return,
            success_rate: Some(success_rate(&crashes)),
            loss_size,
            loss_action,
            drops_per_step: tally.drops_per_step(),
            throughput: tally.throughput(),
            mean_msg_size: tally.mean_msg_size(),
            size_histogram: hist,
            explore,
            entropy_beta: Some(beta as f64),
            spawn_rate: Some(p),
        };
        self.iteration += 1;
        Ok(metrics)
    }

    /// Fresh-environment evaluation at the top spawn rate: sizes greedy,
    /// actions still sampled from the policy, no payload noise.
    pub fn evaluate(&self, episodes: usize, chunk: usize) -> Result<EvalReport> {
        assert!(chunk > 0);
        let p = self.curriculum.high;
        let l = self.model.cfg.l_core();
        let width = self.model.cfg.sizes.msg_features();
        let discrete = matches!(
            self.model.cfg.kind,
            MessageKind::PseudoGradient | MessageKind::Dru { .. } | MessageKind::QValues
        );
        let mut signaling = discrete.then(|| JointCountTable::new(self.model.cfg.sizes.clone()));
        let mut tally = ChannelTally::default();
        let mut hist = vec![0u64; self.model.cfg.sizes.len()];
        let mut sum_return = 0.0f64;
        let mut crashes: Vec<bool> = Vec::with_capacity(episodes);

        let mut start = 0usize;
        let mut c = 0u64;
        while start < episodes {
            let n = chunk.min(episodes - start);
            let rows = n * N_AGENTS;
            let mut envs: Vec<TrafficEnv> = (0..n)
                .map(|j| {
                    TrafficEnv::new(stream(
                        self.seed,
                        Stream::Eval(2_000_000_000 + (start + j) as u64),
                    ))
                })
                .collect();
            // All per-episode streams are keyed by global episode index so
            // the walk is chunk-invariant.
            let mut chans: Vec<ChaCha8Rng> = (0..n)
                .map(|j| stream(self.seed, Stream::Eval((start + j) as u64)))
                .collect();
            let mut size_rngs: Vec<ChaCha8Rng> = (0..n)
                .map(|j| stream(self.seed, Stream::Eval(3_000_000_000 + (start + j) as u64)))
                .collect();
            let mut action_rngs: Vec<ChaCha8Rng> = (0..n)
                .map(|j| stream(self.seed, Stream::Eval(1_000_000_000 + (start + j) as u64)))
                .collect();
            let mut noise_rng = stream(self.seed, Stream::Eval(1_500_000_000 + c));

            let mut t = Tape::new();
            let bound = self.model.params.bind(&mut t);
            let ctx = MessagingCtx {
                model: &self.model,
                channel: &self.channel,
                mode: self.mode,
                explore_kind: self.schedule.explore.kind,
                explore: 0.0,
                train: false,
            };
            let mut hidden = t.zeros(rows, l);
            let mut inbound: Option<BufId> = None;
            let mut rewards: Vec<Vec<f32>> = Vec::with_capacity(EPISODE_STEPS);

            for _ in 0..EPISODE_STEPS {
                for env in envs.iter_mut() {
                    env.spawn(p);
                }
                let mut active = vec![false; rows];
                let mut obs = vec![0.0f32; rows * OBS_LEN];
                for (e, env) in envs.iter().enumerate() {
                    for i in 0..N_AGENTS {
                        let r = e * N_AGENTS + i;
                        active[r] = env.is_active(i);
                        env.observe(i, &mut obs[r * OBS_LEN..(r + 1) * OBS_LEN]);
                    }
                }
                let mask: Vec<f32> = active.iter().map(|&a| f32::from(a)).collect();
                let obs_buf = t.constant(rows, OBS_LEN, obs);
                let feat =
                    self.model.obs_features(&mut t, &bound, obs_buf, None::<&mut ChaCha8Rng>);
                let msg = match inbound {
                    Some(b) => b,
                    None => t.zeros(rows, width),
                };
                let x = self.model.core_output(&mut t, &bound, feat, msg, None, Some(hidden));
                hidden = t.row_scale(x, &mask);
                let comms = step_comms(
                    &mut t,
                    &bound,
                    &ctx,
                    x,
                    Some(&active),
                    &mut RowRngs::PerEnv(&mut size_rngs),
                    &mut noise_rng,
                    &mut chans,
                    &mut tally,
                );
                inbound = Some(comms.inbound);
                let scores = self.model.action_scores(&mut t, &bound, x);
                let sv = t.val(scores).to_vec();
                let mut per_env = vec![[Action::Brake; N_AGENTS]; n];
                let mut actions = vec![0usize; rows];
                for r in 0..rows {
                    if active[r] {
                        let a = softmax_sample(&sv[r * 2..(r + 1) * 2], &mut action_rngs[r / N_AGENTS]);
                        actions[r] = a;
                        per_env[r / N_AGENTS][r % N_AGENTS] = to_action(a);
                    }
                }
                let mut step_rewards = vec![0.0f32; rows];
                for (e, env) in envs.iter_mut().enumerate() {
                    let rs = env.apply(&per_env[e]);
                    step_rewards[e * N_AGENTS..(e + 1) * N_AGENTS].copy_from_slice(&rs);
                }
                rewards.push(step_rewards);

                for &ch in &comms.chosen {
                    if ch >= 0 {
                        hist[ch as usize] += 1;
                    }
                }
                if let Some(table) = signaling.as_mut() {
                    // Same-step pairing: the action taken alongside each sent
                    // message, active rows only.
                    let msg_vals = t.val(comms.msg_rows);
                    for r in 0..rows {
                        if !active[r] {
                            continue;
                        }
                        let phi = comms.sent_size[r];
                        if phi > 0 {
                            let bits: Vec<u8> = (0..phi)
                                .map(|j| u8::from(msg_vals[r * width + j] > 0.0))
                                .collect();
                            table.record(actions[r] as u16, phi, bits);
                        } else {
                            table.record_silent();
                        }
                    }
                }
            }

            let returns = suffix_returns(&rewards, self.schedule.gamma);
            sum_return += returns[0].iter().map(|&x| x as f64).sum::<f64>();
            crashes.extend(envs.iter().map(|e| e.crashed()));
            start += n;
            c += 1;
        }

        Ok(EvalReport {
            episodes,
            mean_return: sum_return / (episodes * N_AGENTS).max(1) as f64,
            success_rate: Some(success_rate(&crashes)),
            tally,
            size_histogram: hist,
            signaling,
            // The recurrent core keeps internal state, so the listening probe
            // is undefined here.
            listening: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Variant;
    use crate::trainer::{ExploreKind, ExploreSchedule, LinearSchedule};

    fn schedule(n_envs: usize) -> Schedule {
        Schedule {
            iterations: 3,
            n_envs,
            gamma: 1.0,
            alpha: 0.1,
            lr: 1e-3,
            grad_clip: Some(0.1),
            explore: ExploreSchedule {
                kind: ExploreKind::EpsGreedy,
                from: 0.5,
                to: 0.05,
                start: 2,
                end: 10,
            },
            entropy: LinearSchedule::standard_entropy(),
        }
    }

    fn spec(sizes: Vec<usize>, mode: SelectionMode) -> TrafficSpec {
        TrafficSpec {
            sizes: SizeSet::new(sizes).unwrap(),
            kind: MessageKind::Dru { sigma: 2.0 },
            mode,
            channel: Channel::slotted(512, Variant::Spacing),
            schedule: schedule(8),
            curriculum: Curriculum::default(),
            seed: 5,
        }
    }

    #[test]
    fn training_runs_and_reports() {
        let mut tr = TrafficTrainer::new(spec(vec![0, 8, 16], SelectionMode::Adaptive)).unwrap();
        let m = tr.train_iteration().unwrap();
        assert_eq!(m.iteration, 0);
        assert!(m.loss_size.is_finite() && m.loss_action.is_finite());
        assert!(m.success_rate.is_some());
        assert_eq!(m.spawn_rate, Some(0.1));
        let m1 = tr.train_iteration().unwrap();
        assert_eq!(m1.iteration, 1);
    }

    #[test]
    fn identical_seeds_reproduce_bitwise() {
        let s = spec(vec![0, 4], SelectionMode::Adaptive);
        let mut a = TrafficTrainer::new(s.clone()).unwrap();
        let mut b = TrafficTrainer::new(s).unwrap();
        for _ in 0..2 {
            let ma = a.train_iteration().unwrap();
            let mb = b.train_iteration().unwrap();
            assert_eq!(ma.mean_return, mb.mean_return);
            assert_eq!(ma.loss_size, mb.loss_size);
            assert_eq!(ma.loss_action, mb.loss_action);
        }
        for ((_, ta), (_, tb)) in a.model.params.iter().zip(b.model.params.iter()) {
            assert_eq!(ta.data, tb.data);
        }
    }

    #[test]
    fn no_comm_runs_with_a_zero_only_size_set() {
        let mut tr = TrafficTrainer::new(spec(vec![0], SelectionMode::Adaptive)).unwrap();
        let m = tr.train_iteration().unwrap();
        // Nothing can occupy the channel.
        assert_eq!(m.throughput, 0.0);
        assert_eq!(m.mean_msg_size, None);
        let rep = tr.evaluate(4, 2).unwrap();
        assert_eq!(rep.tally.sent, 0);
        assert!(rep.listening.is_none());
    }

    #[test]
    fn evaluation_is_chunk_invariant() {
        let tr = TrafficTrainer::new(spec(vec![0, 8], SelectionMode::Adaptive)).unwrap();
        let a = tr.evaluate(8, 8).unwrap();
        let b = tr.evaluate(8, 4).unwrap();
        assert_eq!(a.mean_return, b.mean_return);
        assert_eq!(a.success_rate, b.success_rate);
        assert_eq!(a.size_histogram, b.size_histogram);
    }
}
