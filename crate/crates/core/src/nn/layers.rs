//! Parameterized building blocks. Each layer owns ids into a [`ParamSet`] and
//! records its forward pass onto a caller-supplied tape.

use rand::Rng;

use super::params::{Bound, ParamId, ParamSet};
use super::scalar::Scalar;
use super::tape::{BufId, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Softmax,
}

fn uniform_init<S: Scalar, R: Rng>(rng: &mut R, n: usize, limit: f64) -> Vec<S> {
    (0..n).map(|_| S::of((rng.gen::<f64>() * 2.0 - 1.0) * limit)).collect()
}

/// Fully connected layer, row-major weights `input x output`.
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub act: Activation,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    /// He-uniform init for rectifier layers, Xavier-uniform otherwise.
    pub fn init<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        name: &str,
        input: usize,
        output: usize,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = match act {
            Activation::Relu => (6.0 / input as f64).sqrt(),
            _ => (6.0 / (input + output) as f64).sqrt(),
        };
        let w = ps.add(format!("{name}.w"), input, output, uniform_init(rng, input * output, limit));
        let b = ps.add(format!("{name}.b"), 1, output, vec![S::zero(); output]);
        Dense { w, b, act, input, output }
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, bound: &Bound, x: BufId) -> BufId {
        assert_eq!(t.cols(x), self.input, "dense input width");
        let z = t.matmul(x, bound.buf(self.w));
        let z = t.add_row(z, bound.buf(self.b));
        match self.act {
            Activation::Identity => z,
            Activation::Relu => t.relu(z),
            Activation::Tanh => t.tanh(z),
            Activation::Softmax => t.softmax_rows(z),
        }
    }
}

/// Observation decoder for image views: 3x3 conv (16 filters), relu, 3x3 conv
/// (32 filters), relu, 2x2 max pool, then a dense rectifier layer to
/// `out_features`, with inverted dropout after it during training.
pub struct ConvStack {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    dense: Dense,
    pub h: usize,
    pub w: usize,
    pub out_features: usize,
    pub dropout_p: f64,
}

pub const CONV1_FILTERS: usize = 16;
pub const CONV2_FILTERS: usize = 32;

impl ConvStack {
    pub fn flat_features(h: usize, w: usize) -> usize {
        let (h1, w1) = (h - 2, w - 2);
        let (h2, w2) = (h1 - 2, w1 - 2);
        CONV2_FILTERS * (h2 / 2) * (w2 / 2)
    }

    pub fn init<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        name: &str,
        h: usize,
        w: usize,
        out_features: usize,
        dropout_p: f64,
        rng: &mut R,
    ) -> Self {
        assert!(h >= 6 && w >= 6, "view {h}x{w} too small for two 3x3 convs and a pool");
        let l1 = (6.0 / 9.0f64).sqrt();
        let conv1_w = ps.add(format!("{name}.conv1.w"), 9, CONV1_FILTERS, uniform_init(rng, 9 * CONV1_FILTERS, l1));
        let conv1_b = ps.add(format!("{name}.conv1.b"), 1, CONV1_FILTERS, vec![S::zero(); CONV1_FILTERS]);
        let fan2 = CONV1_FILTERS * 9;
        let l2 = (6.0 / fan2 as f64).sqrt();
        let conv2_w = ps.add(format!("{name}.conv2.w"), fan2, CONV2_FILTERS, uniform_init(rng, fan2 * CONV2_FILTERS, l2));
        let conv2_b = ps.add(format!("{name}.conv2.b"), 1, CONV2_FILTERS, vec![S::zero(); CONV2_FILTERS]);
        let dense = Dense::init(
            ps,
            &format!("{name}.dense"),
            Self::flat_features(h, w),
            out_features,
            Activation::Relu,
            rng,
        );
        ConvStack { conv1_w, conv1_b, conv2_w, conv2_b, dense, h, w, out_features, dropout_p }
    }

    /// `dropout_rng` being `Some` selects training mode; evaluation applies no
    /// dropout and consumes no randomness.
    pub fn forward<S: Scalar, R: Rng>(
        &self,
        t: &mut Tape<S>,
        bound: &Bound,
        x: BufId,
        dropout_rng: Option<&mut R>,
    ) -> BufId {
        let batch = t.rows(x);
        assert_eq!(t.cols(x), self.h * self.w, "view pixels");
        let (h1, w1) = (self.h - 2, self.w - 2);
        let cols1 = t.im2col3(x, 1, self.h, self.w);
        let z1 = t.matmul(cols1, bound.buf(self.conv1_w));
        let z1 = t.add_row(z1, bound.buf(self.conv1_b));
        let z1 = t.relu(z1);
        let img1 = t.pixels_to_images(z1, batch, h1 * w1);

        let (h2, w2) = (h1 - 2, w1 - 2);
        let cols2 = t.im2col3(img1, CONV1_FILTERS, h1, w1);
        let z2 = t.matmul(cols2, bound.buf(self.conv2_w));
        let z2 = t.add_row(z2, bound.buf(self.conv2_b));
        let z2 = t.relu(z2);
        let img2 = t.pixels_to_images(z2, batch, h2 * w2);

        let pooled = t.max_pool2(img2, CONV2_FILTERS, h2, w2);
        let feat = self.dense.forward(t, bound, pooled);
        match dropout_rng {
            Some(rng) => {
                let keep = 1.0 - self.dropout_p;
                let scale = S::of(1.0 / keep);
                let mask: Vec<S> = (0..batch * self.out_features)
                    .map(|_| if rng.gen::<f64>() < keep { scale } else { S::zero() })
                    .collect();
                t.dropout(feat, mask)
            }
            None => feat,
        }
    }
}

/// Single GRU step. Gate layout in the stacked weight matrices is
/// `[reset | update | candidate]`; the candidate path applies the reset gate
/// to the hidden contribution before the tanh.
pub struct GruCell {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn init<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let li = (6.0 / (input + hidden) as f64).sqrt();
        let lh = (6.0 / (hidden + hidden) as f64).sqrt();
        let w_ih = ps.add(format!("{name}.w_ih"), input, 3 * hidden, uniform_init(rng, input * 3 * hidden, li));
        let w_hh = ps.add(format!("{name}.w_hh"), hidden, 3 * hidden, uniform_init(rng, hidden * 3 * hidden, lh));
        let b_ih = ps.add(format!("{name}.b_ih"), 1, 3 * hidden, vec![S::zero(); 3 * hidden]);
        let b_hh = ps.add(format!("{name}.b_hh"), 1, 3 * hidden, vec![S::zero(); 3 * hidden]);
        GruCell { w_ih, w_hh, b_ih, b_hh, input, hidden }
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, bound: &Bound, x: BufId, h: BufId) -> BufId {
        assert_eq!(t.cols(x), self.input);
        assert_eq!(t.cols(h), self.hidden);
        let n = self.hidden;
        let gx = t.matmul(x, bound.buf(self.w_ih));
        let gx = t.add_row(gx, bound.buf(self.b_ih));
        let gh = t.matmul(h, bound.buf(self.w_hh));
        let gh = t.add_row(gh, bound.buf(self.b_hh));

        let rx = t.slice_cols(gx, 0, n);
        let rh = t.slice_cols(gh, 0, n);
        let r_pre = t.add(rx, rh);
        let r = t.sigmoid(r_pre);

        let zx = t.slice_cols(gx, n, 2 * n);
        let zh = t.slice_cols(gh, n, 2 * n);
        let z_pre = t.add(zx, zh);
        let z = t.sigmoid(z_pre);

        let cx = t.slice_cols(gx, 2 * n, 3 * n);
        let chh = t.slice_cols(gh, 2 * n, 3 * n);
        let gated = t.mul(r, chh);
        let c_pre = t.add(cx, gated);
        let cand = t.tanh(c_pre);

        // h' = (1 - z) * cand + z * h, written as cand + z * (h - cand)
        let hmc = t.sub(h, cand);
        let zs = t.mul(z, hmc);
        t.add(cand, zs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn dense_with_zero_weights_outputs_bias() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = stream(0, Stream::ParamInit);
        let d = Dense::init(&mut ps, "d", 3, 2, Activation::Identity, &mut rng);
        for v in ps.get_mut(d.w).data.iter_mut() {
            *v = 0.0;
        }
        ps.get_mut(d.b).data.copy_from_slice(&[0.5, -1.5]);
        let mut t = Tape::new();
        let bound = ps.bind(&mut t);
        let x = t.constant(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]);
        let y = d.forward(&mut t, &bound, x);
        assert_eq!(t.val(y), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn gru_all_zero_is_fixed_at_zero() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = stream(0, Stream::ParamInit);
        let g = GruCell::init(&mut ps, "g", 4, 3, &mut rng);
        for i in 0..ps.len() {
            for v in ps.get_mut(i).data.iter_mut() {
                *v = 0.0;
            }
        }
        let mut t = Tape::new();
        let bound = ps.bind(&mut t);
        let x = t.constant(2, 4, vec![0.0; 8]);
        let h = t.constant(2, 3, vec![0.0; 6]);
        let h2 = g.forward(&mut t, &bound, x, h);
        assert_eq!(t.val(h2), &[0.0; 6]);
    }

    #[test]
    fn conv_stack_dropout_only_in_training() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = stream(3, Stream::ParamInit);
        let cs = ConvStack::init(&mut ps, "obs", 14, 14, 128, 0.5, &mut rng);
        assert_eq!(ConvStack::flat_features(14, 14), 32 * 5 * 5);
        let mut t = Tape::new();
        let bound = ps.bind(&mut t);
        let x = t.constant(1, 196, (0..196).map(|i| i as f64 / 196.0).collect());
        let eval = cs.forward::<f64, rand_chacha::ChaCha8Rng>(&mut t, &bound, x, None);
        let eval2 = cs.forward::<f64, rand_chacha::ChaCha8Rng>(&mut t, &bound, x, None);
        assert_eq!(t.val(eval), t.val(eval2), "eval passes are identical");
        let mut drng = stream(3, Stream::Dropout);
        let train = cs.forward(&mut t, &bound, x, Some(&mut drng));
        let dropped = t.val(train).iter().filter(|&&v| v == 0.0).count();
        // p = 0.5 over 128 features: zeros (dropped or relu-dead) must appear
        assert!(dropped > 16, "dropout left {dropped} zeros");
        let doubled = t
            .val(train)
            .iter()
            .zip(t.val(eval))
            .filter(|(a, e)| **e > 0.0 && ((**a / **e) - 2.0).abs() < 1e-9)
            .count();
        assert!(doubled > 16, "kept units are scaled by 1/keep");
    }
}
