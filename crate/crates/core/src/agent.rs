//! The shared agent network: decode what you see and what you heard, pick a
//! message size, encode a message, pick an action.
//!
//! One parameter set serves every agent (parameter sharing); an agent's
//! individuality enters only through its input: its own view, its inbound
//! messages, and (for the digit task) its id one-hot. The network is built
//! incrementally on a tape so that cross-agent gradient flow through
//! delivered continuous messages comes out of ordinary backprop.
//!
//! Width bookkeeping: observation features are always 128; message features
//! are `max(phi) + |phi|` (padded payload plus a one-hot over the sorted size
//! set, where the size-0 slot exists but is never set); the core width is
//! their sum plus the id width, and the dense core layer maps the
//! concatenated input to exactly that width so the additive skip connection
//! type-checks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::layers::{Activation, ConvStack, Dense, GruCell};
use crate::nn::{Bound, ParamSet, Scalar};
use crate::nn::{BufId, Tape};

pub const OBS_FEATURES: usize = 128;
pub const DROPOUT_P: f64 = 0.5;
/// epsilon for greedy action exploration during training
pub const TRAIN_ACTION_EPS: f64 = 0.01;
/// discrete message payloads are capped at 2^8 codebook entries per size
pub const MAX_QVALUES_SIZE: usize = 8;

/// Sorted set of allowed message sizes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SizeSet {
    sizes: Vec<usize>,
}

impl SizeSet {
    pub fn new(mut sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::config("sizes", "size set must be nonempty"));
        }
        sizes.sort_unstable();
        sizes.dedup();
        Ok(SizeSet { sizes })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn max_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn has_zero(&self) -> bool {
        self.sizes[0] == 0
    }

    /// Index of `size` within the sorted set.
    pub fn index_of(&self, size: usize) -> Option<usize> {
        self.sizes.binary_search(&size).ok()
    }

    pub fn nonzero(&self) -> &[usize] {
        if self.has_zero() {
            &self.sizes[1..]
        } else {
            &self.sizes
        }
    }

    /// Index of `size` among the nonzero sizes (encoder head index).
    pub fn nonzero_index(&self, size: usize) -> Option<usize> {
        self.nonzero().binary_search(&size).ok()
    }

    /// Width of the decoded message feature block.
    pub fn msg_features(&self) -> usize {
        self.max_size() + self.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MessageKind {
    Continuous,
    PseudoGradient,
    Dru { sigma: f64 },
    QValues,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSelector {
    /// epsilon-greedy over a Q head, trained by return regression.
    QGreedy,
    /// Softmax policy head (samples at evaluation too) plus a value baseline.
    Stochastic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObsEncoder {
    /// Image views through the conv stack.
    Conv { h: usize, w: usize },
    /// Flat vectors through one rectifier layer.
    Dense { input: usize },
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub n_agents: usize,
    pub obs: ObsEncoder,
    /// Append a one-hot agent id to the core input (digit task only).
    pub include_agent_id: bool,
    /// Append a GRU over the core output (junction task only).
    pub recurrent: bool,
    pub sizes: SizeSet,
    pub kind: MessageKind,
    pub selector: ActionSelector,
    pub n_actions: usize,
}

impl ModelConfig {
    pub fn l_core(&self) -> usize {
        OBS_FEATURES
            + self.sizes.msg_features()
            + if self.include_agent_id { self.n_agents } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if let MessageKind::Dru { sigma } = self.kind {
            if !(sigma > 0.0) {
                return Err(Error::config("message.sigma", "must be positive for the noised kind"));
            }
        }
        if self.kind == MessageKind::QValues && self.sizes.max_size() > MAX_QVALUES_SIZE {
            return Err(Error::config(
                "sizes",
                format!(
                    "codebook messages cap payload size at {MAX_QVALUES_SIZE} (2^size codebook entries); got {}",
                    self.sizes.max_size()
                ),
            ));
        }
        if self.n_actions == 0 {
            return Err(Error::config("n_actions", "need at least one action"));
        }
        Ok(())
    }
}

/// All shared parameters plus the layer structure to run them.
pub struct Model<S> {
    pub cfg: ModelConfig,
    pub params: ParamSet<S>,
    obs_conv: Option<ConvStack>,
    obs_dense: Option<Dense>,
    core: Dense,
    gru: Option<GruCell>,
    size_head: Dense,
    action_head: Dense,
    value_head: Option<Dense>,
    enc_shared: Dense,
    /// Per nonzero size: either a tanh payload head or a codebook value head.
    enc_heads: Vec<Dense>,
}

impl<S: Scalar> Model<S> {
    pub fn init(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let l = cfg.l_core();
        let (obs_conv, obs_dense) = match cfg.obs {
            ObsEncoder::Conv { h, w } => {
                (Some(ConvStack::init(&mut ps, "obs", h, w, OBS_FEATURES, DROPOUT_P, rng)), None)
            }
            ObsEncoder::Dense { input } => (
                None,
                Some(Dense::init(&mut ps, "obs", input, OBS_FEATURES, Activation::Relu, rng)),
            ),
        };
        let core = Dense::init(&mut ps, "core", l, l, Activation::Relu, rng);
        let gru = cfg.recurrent.then(|| GruCell::init(&mut ps, "gru", l, l, rng));
        let size_head = Dense::init(&mut ps, "size_q", l, cfg.sizes.len(), Activation::Identity, rng);
        let action_head = Dense::init(&mut ps, "action", l, cfg.n_actions, Activation::Identity, rng);
        let value_head = (cfg.selector == ActionSelector::Stochastic)
            .then(|| Dense::init(&mut ps, "value", l, 1, Activation::Identity, rng));
        let enc_shared = Dense::init(&mut ps, "enc.shared", l, l, Activation::Tanh, rng);
        let enc_heads = cfg
            .sizes
            .nonzero()
            .iter()
            .map(|&phi| match cfg.kind {
                MessageKind::QValues => Dense::init(
                    &mut ps,
                    &format!("enc.q{phi}"),
                    l,
                    1usize << phi,
                    Activation::Identity,
                    rng,
                ),
                _ => Dense::init(&mut ps, &format!("enc.m{phi}"), l, phi, Activation::Tanh, rng),
            })
            .collect();
        Ok(Model {
            cfg,
            params: ps,
            obs_conv,
            obs_dense,
            core,
            gru,
            size_head,
            action_head,
            value_head,
            enc_shared,
            enc_heads,
        })
    }

    /// Observation rows to 128 features. `dropout_rng` selects training mode
    /// for the conv path.
    pub fn obs_features<R: Rng>(
        &self,
        t: &mut Tape<S>,
        bound: &Bound,
        obs: BufId,
        dropout_rng: Option<&mut R>,
    ) -> BufId {
        match (&self.obs_conv, &self.obs_dense) {
            (Some(conv), _) => conv.forward(t, bound, obs, dropout_rng),
            (_, Some(dense)) => dense.forward(t, bound, obs),
            _ => unreachable!(),
        }
    }

    /// Concatenate features, apply the rectifier core with its additive skip,
    /// and (when recurrent) one GRU step. The returned buffer is the core
    /// output; for the recurrent model it doubles as the next hidden state.
    pub fn core_output(
        &self,
        t: &mut Tape<S>,
        bound: &Bound,
        obs_feat: BufId,
        msg_feat: BufId,
        agent_ids: Option<BufId>,
        hidden: Option<BufId>,
    ) -> BufId {
        let mut parts = vec![obs_feat, msg_feat];
        if let Some(ids) = agent_ids {
            assert!(self.cfg.include_agent_id, "id features on a model without them");
            parts.push(ids);
        } else {
            assert!(!self.cfg.include_agent_id, "model expects id features");
        }
        let cat = t.concat_cols(&parts);
        assert_eq!(t.cols(cat), self.cfg.l_core(), "core input width");
        let z = self.core.forward(t, bound, cat);
        let x = t.add(z, cat);
        match (&self.gru, hidden) {
            (Some(gru), Some(h)) => gru.forward(t, bound, x, h),
            (None, None) => x,
            _ => panic!("hidden state must be passed exactly when the model is recurrent"),
        }
    }

    /// One scalar value per size in the set.
    pub fn size_values(&self, t: &mut Tape<S>, bound: &Bound, x: BufId) -> BufId {
        self.size_head.forward(t, bound, x)
    }

    /// Action scores: Q values or policy logits depending on the selector.
    pub fn action_scores(&self, t: &mut Tape<S>, bound: &Bound, x: BufId) -> BufId {
        self.action_head.forward(t, bound, x)
    }

    /// State-value baseline (stochastic selector only).
    pub fn state_value(&self, t: &mut Tape<S>, bound: &Bound, x: BufId) -> BufId {
        self.value_head
            .as_ref()
            .expect("value head exists only for the stochastic selector")
            .forward(t, bound, x)
    }

    /// Raw per-size encoder outputs. For the tanh kinds these are payload
    /// candidates m; for the codebook kind these are per-codeword values.
    pub fn encoder_outputs(&self, t: &mut Tape<S>, bound: &Bound, x: BufId) -> Vec<BufId> {
        let shared = self.enc_shared.forward(t, bound, x);
        self.enc_heads.iter().map(|h| h.forward(t, bound, shared)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Apply a message kind's payload transform to a raw tanh head output.
///
/// Train-mode noise for the noised kind is drawn here, row-major, so a caller
/// holding the rng can replay it. The codebook kind never passes through
/// this: its payloads are constants chosen off-tape.
pub fn apply_kind<S: Scalar>(
    t: &mut Tape<S>,
    m: BufId,
    kind: MessageKind,
    mode: Mode,
    rng: &mut impl Rng,
) -> BufId {
    match (kind, mode) {
        (MessageKind::Continuous, _) => m,
        (MessageKind::PseudoGradient, _) => t.sign_ste(m),
        (MessageKind::Dru { sigma }, Mode::Train) => {
            let n = t.rows(m) * t.cols(m);
            let noise: Vec<S> =
                (0..n).map(|_| S::of(rng.sample::<f64, _>(StandardNormal))).collect();
            t.logistic_noise(m, S::of(sigma), noise)
        }
        (MessageKind::Dru { .. }, Mode::Eval) => {
            // hard threshold 1{m > 0}: sign of tanh(m) mapped into {0, 1}
            let s = t.sign_ste(m);
            let ones = t.constant(t.rows(s), t.cols(s), vec![S::one(); t.rows(s) * t.cols(s)]);
            let shifted = t.add(s, ones);
            t.scale(shifted, S::of(0.5))
        }
        (MessageKind::QValues, _) => panic!("codebook payloads are assembled from constants"),
    }
}

/// The codeword for index `i` at payload size `phi`: bit j of `i` becomes
/// entry j. Indices follow the value head's output ordering.
pub fn codeword<S: Scalar>(i: usize, phi: usize) -> Vec<S> {
    debug_assert!(i < (1 << phi));
    (0..phi).map(|j| if (i >> j) & 1 == 1 { S::one() } else { S::zero() }).collect()
}

/// Mean-decode a receiver's inbound messages into the fixed feature layout:
/// payload padded to `max(phi)`, then the one-hot of the size's index in the
/// sorted set. No messages decode to all zeros.
pub fn decode_messages<S: Scalar>(
    inbound: &[(usize, Vec<S>)],
    sizes: &SizeSet,
) -> Result<Vec<S>> {
    let width = sizes.msg_features();
    let mut out = vec![S::zero(); width];
    if inbound.is_empty() {
        return Ok(out);
    }
    for (phi, payload) in inbound {
        if payload.len() != *phi {
            return Err(Error::shape(
                "inbound message payload",
                format!("{phi} entries"),
                payload.len(),
            ));
        }
        let Some(slot) = sizes.index_of(*phi) else {
            return Err(Error::Usage(format!("inbound size {phi} not in the size set")));
        };
        if *phi == 0 {
            return Err(Error::Usage("size-0 message cannot be inbound".into()));
        }
        for (j, &p) in payload.iter().enumerate() {
            out[j] = out[j] + p;
        }
        out[sizes.max_size() + slot] = out[sizes.max_size() + slot] + S::one();
    }
    let inv = S::of(1.0 / inbound.len() as f64);
    for v in &mut out {
        *v = *v * inv;
    }
    Ok(out)
}

/// Block-mix weights that average each environment's delivered messages into
/// every co-located receiver, excluding the receiver's own message.
/// `delivered[e]` lists the sender ids whose messages arrived in env `e`.
pub fn delivery_weights<S: Scalar>(delivered: &[Vec<usize>], n_agents: usize) -> Vec<S> {
    let mut w = vec![S::zero(); delivered.len() * n_agents * n_agents];
    for (e, senders) in delivered.iter().enumerate() {
        for i in 0..n_agents {
            let others = senders.iter().filter(|&&s| s != i).count();
            if others == 0 {
                continue;
            }
            let inv = S::of(1.0 / others as f64);
            for &s in senders.iter().filter(|&&s| s != i) {
                w[(e * n_agents + i) * n_agents + s] = inv;
            }
        }
    }
    w
}

/// Sample an index from softmax(values / eta). Shift-invariant and numerically
/// safe for any finite values.
pub fn boltzmann_pick<S: Scalar>(values: &[S], eta: f64, rng: &mut impl Rng) -> usize {
    debug_assert!(eta > 0.0);
    let scaled: Vec<f64> = values.iter().map(|v| v.f64() / eta).collect();
    let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&z| (z - mx).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &e) in exps.iter().enumerate() {
        u -= e;
        if u <= 0.0 {
            return i;
        }
    }
    exps.len() - 1
}

/// Argmax with lowest-index tie-break.
pub fn argmax_lowest<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// With probability `eps` a uniform index, otherwise the argmax.
pub fn eps_greedy_pick<S: Scalar>(values: &[S], eps: f64, rng: &mut impl Rng) -> usize {
    if rng.gen::<f64>() < eps {
        rng.gen_range(0..values.len())
    } else {
        argmax_lowest(values)
    }
}

/// Sample from softmax(logits); the stochastic selector uses this in both
/// modes.
pub fn softmax_sample<S: Scalar>(logits: &[S], rng: &mut impl Rng) -> usize {
    boltzmann_pick(logits, 1.0, rng)
}
