//! Finite-difference verification of the backward pass.
//!
//! Every graph is instantiated in f64 (see [`super::scalar`]) and sampled
//! parameter entries are perturbed by a central difference. Straight-through
//! estimators define their gradient against a smooth surrogate, so each case
//! builds two graphs: the analytic one that is differentiated, and the
//! reference one that finite differences probe. For ordinary operations the
//! two are identical.

use rand::Rng;

use super::layers::{Activation, ConvStack, Dense, GruCell};
use super::params::{Bound, ParamId, ParamSet};
use super::tape::{BufId, Tape};
use crate::rng::{stream, Stream};

pub const FD_STEP: f64 = 1e-5;
pub const REL_ERR_LIMIT: f64 = 1e-4;

/// Which of the two graphs a case closure should record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    /// The graph whose tape gradient is under test.
    Analytic,
    /// The graph finite differences are taken on; substitute the smooth
    /// surrogate of any straight-through forward here.
    Reference,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub name: &'static str,
    pub checked: usize,
    pub worst_rel_err: f64,
}

/// Error relative to the larger magnitude, floored so that vanishing entries
/// compare absolutely instead of amplifying finite-difference noise.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Up to `per_tensor` distinct entries from every tensor in the set.
pub fn sample_entries(
    ps: &ParamSet<f64>,
    per_tensor: usize,
    rng: &mut impl Rng,
) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for (pid, tensor) in ps.iter() {
        let n = tensor.data.len();
        if n <= per_tensor {
            out.extend((0..n).map(|i| (pid, i)));
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < per_tensor {
                picked.insert(rng.gen_range(0..n));
            }
            out.extend(picked.into_iter().map(|i| (pid, i)));
        }
    }
    out
}

fn scalar_loss(
    ps: &ParamSet<f64>,
    pass: Pass,
    run: &mut impl FnMut(&mut Tape<f64>, &Bound, Pass) -> BufId,
) -> f64 {
    let mut t = Tape::new();
    let bound = ps.bind(&mut t);
    let loss = run(&mut t, &bound, pass);
    assert_eq!((t.rows(loss), t.cols(loss)), (1, 1), "loss must be scalar");
    t.val(loss)[0]
}

/// Compare the tape gradient of `run`'s analytic graph against central
/// differences of its reference graph at the sampled entries.
pub fn check(
    name: &'static str,
    ps: &mut ParamSet<f64>,
    entries: &[(ParamId, usize)],
    mut run: impl FnMut(&mut Tape<f64>, &Bound, Pass) -> BufId,
) -> FdReport {
    let analytic: Vec<f64> = {
        let mut t = Tape::new();
        let bound = ps.bind(&mut t);
        let loss = run(&mut t, &bound, Pass::Analytic);
        assert_eq!((t.rows(loss), t.cols(loss)), (1, 1), "loss must be scalar");
        let grads = t.backward(loss);
        let views = bound.grads(&grads);
        entries
            .iter()
            .map(|&(pid, i)| views[pid].map_or(0.0, |g| g[i]))
            .collect()
    };

    let mut worst = 0.0f64;
    for (k, &(pid, i)) in entries.iter().enumerate() {
        let orig = ps.get(pid).data[i];
        ps.get_mut(pid).data[i] = orig + FD_STEP;
        let up = scalar_loss(ps, Pass::Reference, &mut run);
        ps.get_mut(pid).data[i] = orig - FD_STEP;
        let down = scalar_loss(ps, Pass::Reference, &mut run);
        ps.get_mut(pid).data[i] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[k], fd));
    }
    FdReport { name, checked: entries.len(), worst_rel_err: worst }
}

fn rand_mat(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
}

fn case_dense_stack() -> FdReport {
    let mut rng = stream(11, Stream::ParamInit);
    let mut ps = ParamSet::new();
    let l1 = Dense::init(&mut ps, "l1", 6, 8, Activation::Relu, &mut rng);
    let l2 = Dense::init(&mut ps, "l2", 8, 4, Activation::Tanh, &mut rng);
    let x = rand_mat(&mut rng, 5 * 6);
    let target = rand_mat(&mut rng, 5 * 4);
    let entries = sample_entries(&ps, 10, &mut rng);
    check("dense stack", &mut ps, &entries, |t, b, _| {
        let xb = t.constant(5, 6, x.clone());
        let h = l1.forward(t, b, xb);
        let y = l2.forward(t, b, h);
        let tg = t.constant(5, 4, target.clone());
        let d = t.sub(y, tg);
        let sq = t.mul(d, d);
        t.mean_all(sq)
    })
}

fn case_softmax_cross_entropy() -> FdReport {
    let mut rng = stream(12, Stream::ParamInit);
    let mut ps = ParamSet::new();
    let head = Dense::init(&mut ps, "head", 5, 4, Activation::Identity, &mut rng);
    let x = rand_mat(&mut rng, 6 * 5);
    let labels: Vec<u32> = (0..6).map(|_| rng.gen_range(0..4)).collect();
    let entries = sample_entries(&ps, 10, &mut rng);
    check("softmax cross entropy", &mut ps, &entries, |t, b, _| {
        let xb = t.constant(6, 5, x.clone());
        let logits = head.forward(t, b, xb);
        let logp = t.log_softmax_rows(logits);
        let picked = t.gather_cols(logp, &labels);
        let m = t.mean_all(picked);
        t.scale(m, -1.0)
    })
}

fn case_probability_readout() -> FdReport {
    let mut rng = stream(13, Stream::ParamInit);
    let mut ps = ParamSet::new();
    let head = Dense::init(&mut ps, "head", 4, 5, Activation::Identity, &mut rng);
    let x = rand_mat(&mut rng, 3 * 4);
    let c = rand_mat(&mut rng, 3 * 5);
    let entries = sample_entries(&ps, 10, &mut rng);
    check("probability readout", &mut ps, &entries, |t, b, _| {
        let xb = t.constant(3, 4, x.clone());
        let probs = head.forward(t, b, xb);
        let probs = t.softmax_rows(probs);
        let cb = t.constant(3, 5, c.clone());
        let weighted = t.mul(probs, cb);
        t.sum_all(weighted)
    })
}

fn case_conv_stack() -> FdReport {
    let mut rng = stream(14, Stream::ParamInit);
    let mut ps = ParamSet::new();
    let conv = ConvStack::init(&mut ps, "obs", 8, 8, 8, 0.5, &mut rng);
    let x: Vec<f64> = (0..2 * 64).map(|_| rng.gen::<f64>()).collect();
    let entries = sample_entries(&ps, 6, &mut rng);
    check("conv stack with dropout", &mut ps, &entries, |t, b, _| {
        // A fresh stream per rebuild keeps the dropout mask identical across
        // the perturbed forwards.
        let mut drop_rng = stream(14, Stream::Dropout);
        let xb = t.constant(2, 64, x.clone());
        let y = conv.forward(t, b, xb, Some(&mut drop_rng));
        let sq = t.mul(y, y);
        t.sum_all(sq)
    })
}

fn case_gru_two_steps() -> FdReport {
    let mut rng = stream(15, Stream::ParamInit);
    let mut ps = ParamSet::new();
    let gru = GruCell::init(&mut ps, "gru", 4, 3, &mut rng);
    let x1 = rand_mat(&mut rng, 3 * 4);
    let x2 = rand_mat(&mut rng, 3 * 4);
    let h0 = rand_mat(&mut rng, 3 * 3);
    let mask = [1.0, 0.0, 1.0];
    let entries = sample_entries(&ps, 10, &mut rng);
    check("gru over two steps", &mut ps, &entries, |t, b, _| {
        let x1b = t.constant(3, 4, x1.clone());
        let x2b = t.constant(3, 4, x2.clone());
        let h0b = t.constant(3, 3, h0.clone());
        let h1 = gru.forward(t, b, x1b, h0b);
        let h1 = t.row_scale(h1, &mask);
        let h2 = gru.forward(t, b, x2b, h1);
        let sq = t.mul(h2, h2);
        t.sum_all(sq)
    })
}

fn case_message_assembly() -> FdReport {
    let mut rng = stream(16, Stream::ParamInit);
    let mut ps = ParamSet::new();
    let shared = Dense::init(&mut ps, "enc.shared", 6, 6, Activation::Tanh, &mut rng);
    let h1 = Dense::init(&mut ps, "enc.m1", 6, 1, Activation::Tanh, &mut rng);
    let h2 = Dense::init(&mut ps, "enc.m2", 6, 2, Activation::Tanh, &mut rng);
    let xa = rand_mat(&mut rng, 4 * 2);
    let xb = rand_mat(&mut rng, 4 * 4);
    // Sender 0 uses the one-entry head, 1 stays silent, 2 and 3 the two-entry
    // head; per-pair mixing weights stand in for delivery masks.
    let choice = [0i32, -1, 1, 1];
    let slot = [0i32, -1, 1, 1];
    let weights = [0.0, 0.5, 1.0, 0.0, 0.0, 0.25, 0.75, 0.0];
    let entries = sample_entries(&ps, 10, &mut rng);
    check("message assembly and mixing", &mut ps, &entries, |t, b, _| {
        let a = t.constant(4, 2, xa.clone());
        let bb = t.constant(4, 4, xb.clone());
        let feat = t.concat_cols(&[a, bb]);
        let s = shared.forward(t, b, feat);
        let m1 = h1.forward(t, b, s);
        let m2 = h2.forward(t, b, s);
        let msg = t.assemble_messages(&[m1, m2], &choice, &slot, 2, 2);
        let mixed = t.block_row_mix(msg, 2, &weights);
        let sq = t.mul(mixed, mixed);
        t.sum_all(sq)
    })
}

fn case_binarized_payload() -> FdReport {
    let mut rng = stream(17, Stream::ParamInit);
    let mut ps = ParamSet::new();
    let head = Dense::init(&mut ps, "enc.m3", 5, 3, Activation::Tanh, &mut rng);
    let x = rand_mat(&mut rng, 4 * 5);
    let c = rand_mat(&mut rng, 4 * 3);
    let entries = sample_entries(&ps, 10, &mut rng);
    // The readout is linear in the payload, so the surrogate's gradient is
    // exactly what the binarized graph must report.
    check("binarized payload surrogate", &mut ps, &entries, |t, b, pass| {
        let xb = t.constant(4, 5, x.clone());
        let m = head.forward(t, b, xb);
        let y = match pass {
            Pass::Analytic => t.sign_ste(m),
            Pass::Reference => t.tanh(m),
        };
        let cb = t.constant(4, 3, c.clone());
        let weighted = t.mul(y, cb);
        t.sum_all(weighted)
    })
}

fn case_noised_payload() -> FdReport {
    let mut rng = stream(18, Stream::ParamInit);
    let mut ps = ParamSet::new();
    let head = Dense::init(&mut ps, "enc.m3", 4, 3, Activation::Tanh, &mut rng);
    let x = rand_mat(&mut rng, 5 * 4);
    let noise = rand_mat(&mut rng, 5 * 3);
    let target = rand_mat(&mut rng, 5 * 3);
    let entries = sample_entries(&ps, 10, &mut rng);
    check("noised payload", &mut ps, &entries, |t, b, _| {
        let xb = t.constant(5, 4, x.clone());
        let m = head.forward(t, b, xb);
        let y = t.logistic_noise(m, 2.0, noise.clone());
        let tg = t.constant(5, 3, target.clone());
        let d = t.sub(y, tg);
        let sq = t.mul(d, d);
        t.mean_all(sq)
    })
}

fn case_size_value_regression() -> FdReport {
    let mut rng = stream(19, Stream::ParamInit);
    let mut ps = ParamSet::new();
    let trunk = Dense::init(&mut ps, "core", 6, 6, Activation::Relu, &mut rng);
    let head = Dense::init(&mut ps, "size_q", 6, 4, Activation::Identity, &mut rng);
    let x = rand_mat(&mut rng, 6 * 6);
    let chosen: Vec<u32> = vec![3, 0, 0, 2, 1, 0];
    let mask = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0];
    let targets = rand_mat(&mut rng, 6);
    let entries = sample_entries(&ps, 10, &mut rng);
    check("size value regression", &mut ps, &entries, |t, b, _| {
        let xb = t.constant(6, 6, x.clone());
        let h = trunk.forward(t, b, xb);
        let q = head.forward(t, b, h);
        let picked = t.gather_cols(q, &chosen);
        let tg = t.constant(6, 1, targets.clone());
        let d = t.sub(picked, tg);
        let sq = t.mul(d, d);
        let masked = t.row_scale(sq, &mask);
        let s = t.sum_all(masked);
        t.scale(s, 1.0 / 4.0)
    })
}

fn case_policy_gradient_objective() -> FdReport {
    let mut rng = stream(20, Stream::ParamInit);
    let mut ps = ParamSet::new();
    let trunk = Dense::init(&mut ps, "core", 5, 6, Activation::Relu, &mut rng);
    let pol = Dense::init(&mut ps, "action", 6, 3, Activation::Identity, &mut rng);
    let val = Dense::init(&mut ps, "value", 6, 1, Activation::Identity, &mut rng);
    let x = rand_mat(&mut rng, 5 * 5);
    let actions: Vec<u32> = (0..5).map(|_| rng.gen_range(0..3)).collect();
    let adv_neg = rand_mat(&mut rng, 5);
    let returns = rand_mat(&mut rng, 5);
    let mask = [1.0, 1.0, 0.0, 1.0, 1.0];
    let beta = 0.37;
    let beta_mask: Vec<f64> = mask.iter().map(|m| m * beta).collect();
    let entries = sample_entries(&ps, 10, &mut rng);
    check("policy gradient objective", &mut ps, &entries, |t, b, _| {
        let xb = t.constant(5, 5, x.clone());
        let h = trunk.forward(t, b, xb);
        let logits = pol.forward(t, b, h);
        let logp = t.log_softmax_rows(logits);
        let psm = t.softmax_rows(logits);
        let v = val.forward(t, b, h);

        let picked = t.gather_cols(logp, &actions);
        let pol_term = t.row_scale(picked, &adv_neg);
        let pol_term = t.sum_all(pol_term);

        let g = t.constant(5, 1, returns.clone());
        let d = t.sub(v, g);
        let sq = t.mul(d, d);
        let vmask = t.row_scale(sq, &mask);
        let val_term = t.sum_all(vmask);

        let plogp = t.mul(psm, logp);
        let negent = t.sum_cols(plogp);
        let ent = t.row_scale(negent, &beta_mask);
        let ent_term = t.sum_all(ent);

        let sum = t.add(pol_term, val_term);
        let sum = t.add(sum, ent_term);
        t.scale(sum, 1.0 / 4.0)
    })
}

/// Every backward path the trainers rely on, as randomized microcases.
pub fn run_standard_suite() -> Vec<FdReport> {
    vec![
        case_dense_stack(),
        case_softmax_cross_entropy(),
        case_probability_readout(),
        case_conv_stack(),
        case_gru_two_steps(),
        case_message_assembly(),
        case_binarized_payload(),
        case_noised_payload(),
        case_size_value_regression(),
        case_policy_gradient_objective(),
    ]
}
