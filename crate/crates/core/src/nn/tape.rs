//! Reverse-mode differentiation over a flat op list.
//!
//! Every buffer is a row-major matrix; convolution geometry lives in the ops
//! that need it (images are rows, channel-major). Forward methods compute
//! eagerly and record; [`Tape::backward`] replays the list in reverse and
//! accumulates gradients for every buffer reachable from a parameter.
//!
//! Shape mismatches are programmer error and panic via `assert!`.

use super::scalar::{gemm, Scalar};

pub type BufId = usize;

pub struct Buf<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
    pub needs_grad: bool,
}

enum Op<S> {
    Matmul { a: BufId, b: BufId, out: BufId },
    AddRow { a: BufId, bias: BufId, out: BufId },
    Add { a: BufId, b: BufId, out: BufId },
    Sub { a: BufId, b: BufId, out: BufId },
    Mul { a: BufId, b: BufId, out: BufId },
    Scale { a: BufId, c: S, out: BufId },
    Relu { a: BufId, out: BufId },
    Tanh { a: BufId, out: BufId },
    Sigmoid { a: BufId, out: BufId },
    SoftmaxRows { a: BufId, out: BufId },
    LogSoftmaxRows { a: BufId, out: BufId },
    Concat { parts: Vec<BufId>, out: BufId },
    SliceCols { a: BufId, from: usize, out: BufId },
    GatherCols { a: BufId, idx: Vec<u32>, out: BufId },
    RowScale { a: BufId, coef: Vec<S>, out: BufId },
    SumCols { a: BufId, out: BufId },
    MeanAll { a: BufId, out: BufId },
    SumAll { a: BufId, out: BufId },
    Im2col { a: BufId, chans: usize, h: usize, w: usize, out: BufId },
    PixelsToImages { a: BufId, positions: usize, chans: usize, out: BufId },
    MaxPool2 { a: BufId, idx: Vec<u32>, out: BufId },
    Dropout { a: BufId, mask: Vec<S>, out: BufId },
    SignSte { a: BufId, out: BufId },
    LogisticNoise { a: BufId, out: BufId },
    AssembleMessages { heads: Vec<BufId>, choice: Vec<i32>, out: BufId },
    BlockRowMix { a: BufId, group: usize, weights: Vec<S>, out: BufId },
}

pub struct Tape<S> {
    bufs: Vec<Buf<S>>,
    ops: Vec<Op<S>>,
}

/// Per-buffer gradients produced by one backward pass.
pub struct Gradients<S> {
    g: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: BufId) -> Option<&[S]> {
        self.g[id].as_deref()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { bufs: Vec::new(), ops: Vec::new() }
    }

    fn alloc(&mut self, rows: usize, cols: usize, data: Vec<S>, needs_grad: bool) -> BufId {
        assert_eq!(data.len(), rows * cols, "buffer data does not match shape");
        self.bufs.push(Buf { rows, cols, data, needs_grad });
        self.bufs.len() - 1
    }

    /// Input that gradients flow into (parameters).
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<S>) -> BufId {
        self.alloc(rows, cols, data, true)
    }

    /// Input treated as constant; backward never accumulates into it.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<S>) -> BufId {
        self.alloc(rows, cols, data, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> BufId {
        self.alloc(rows, cols, vec![S::zero(); rows * cols], false)
    }

    pub fn val(&self, id: BufId) -> &[S] {
        &self.bufs[id].data
    }

    pub fn rows(&self, id: BufId) -> usize {
        self.bufs[id].rows
    }

    pub fn cols(&self, id: BufId) -> usize {
        self.bufs[id].cols
    }

    fn out_like(&mut self, rows: usize, cols: usize, inputs: &[BufId]) -> BufId {
        let needs = inputs.iter().any(|&i| self.bufs[i].needs_grad);
        self.alloc(rows, cols, vec![S::zero(); rows * cols], needs)
    }

    // ── forward ops ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: BufId, b: BufId) -> BufId {
        let (m, k) = (self.bufs[a].rows, self.bufs[a].cols);
        let (k2, n) = (self.bufs[b].rows, self.bufs[b].cols);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = self.out_like(m, n, &[a, b]);
        let (abuf, bbuf, obuf) = (a, b, out);
        // split borrows: copy via raw indices
        let a_data = std::mem::take(&mut self.bufs[abuf].data);
        let b_data = std::mem::take(&mut self.bufs[bbuf].data);
        {
            let c = &mut self.bufs[obuf].data;
            gemm(false, false, m, k, n, S::one(), &a_data, &b_data, S::zero(), c);
        }
        self.bufs[abuf].data = a_data;
        self.bufs[bbuf].data = b_data;
        self.ops.push(Op::Matmul { a, b, out });
        out
    }

    pub fn add_row(&mut self, a: BufId, bias: BufId) -> BufId {
        let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
        assert_eq!(self.bufs[bias].rows, 1, "bias must be a single row");
        assert_eq!(self.bufs[bias].cols, n, "bias width");
        let out = self.out_like(m, n, &[a, bias]);
        for r in 0..m {
            for c in 0..n {
                let v = self.bufs[a].data[r * n + c] + self.bufs[bias].data[c];
                self.bufs[out].data[r * n + c] = v;
            }
        }
        self.ops.push(Op::AddRow { a, bias, out });
        out
    }

    fn zip2(&mut self, a: BufId, b: BufId, f: impl Fn(S, S) -> S) -> BufId {
        let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
        assert_eq!((m, n), (self.bufs[b].rows, self.bufs[b].cols), "elementwise shape");
        let out = self.out_like(m, n, &[a, b]);
        for i in 0..m * n {
            self.bufs[out].data[i] = f(self.bufs[a].data[i], self.bufs[b].data[i]);
        }
        out
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> BufId {
        let out = self.zip2(a, b, |x, y| x + y);
        self.ops.push(Op::Add { a, b, out });
        out
    }

    pub fn sub(&mut self, a: BufId, b: BufId) -> BufId {
        let out = self.zip2(a, b, |x, y| x - y);
        self.ops.push(Op::Sub { a, b, out });
        out
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> BufId {
        let out = self.zip2(a, b, |x, y| x * y);
        self.ops.push(Op::Mul { a, b, out });
        out
    }

    pub fn scale(&mut self, a: BufId, c: S) -> BufId {
        let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
        let out = self.out_like(m, n, &[a]);
        for i in 0..m * n {
            self.bufs[out].data[i] = self.bufs[a].data[i] * c;
        }
        self.ops.push(Op::Scale { a, c, out });
        out
    }

    fn map1(&mut self, a: BufId, f: impl Fn(S) -> S) -> BufId {
        let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
        let out = self.out_like(m, n, &[a]);
        for i in 0..m * n {
            self.bufs[out].data[i] = f(self.bufs[a].data[i]);
        }
        out
    }

    pub fn relu(&mut self, a: BufId) -> BufId {
        let out = self.map1(a, |x| if x > S::zero() { x } else { S::zero() });
        self.ops.push(Op::Relu { a, out });
        out
    }

    pub fn tanh(&mut self, a: BufId) -> BufId {
        let out = self.map1(a, |x| x.tanh());
        self.ops.push(Op::Tanh { a, out });
        out
    }

    pub fn sigmoid(&mut self, a: BufId) -> BufId {
        let out = self.map1(a, |x| S::one() / (S::one() + (-x).exp()));
        self.ops.push(Op::Sigmoid { a, out });
        out
    }

    pub fn softmax_rows(&mut self, a: BufId) -> BufId {
        let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
        assert!(n > 0);
        let out = self.out_like(m, n, &[a]);
        for r in 0..m {
            let row = &self.bufs[a].data[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(row[0], S::max);
            let mut sum = S::zero();
            let mut tmp = vec![S::zero(); n];
            for c in 0..n {
                tmp[c] = (row[c] - mx).exp();
                sum = sum + tmp[c];
            }
            for c in 0..n {
                self.bufs[out].data[r * n + c] = tmp[c] / sum;
            }
        }
        self.ops.push(Op::SoftmaxRows { a, out });
        out
    }

    pub fn log_softmax_rows(&mut self, a: BufId) -> BufId {
        let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
        assert!(n > 0);
        let out = self.out_like(m, n, &[a]);
        let (head, tail) = self.bufs.split_at_mut(out);
        for r in 0..m {
            let row = &head[a].data[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(row[0], S::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<S>().ln();
            for c in 0..n {
                tail[0].data[r * n + c] = row[c] - lse;
            }
        }
        self.ops.push(Op::LogSoftmaxRows { a, out });
        out
    }

    pub fn concat_cols(&mut self, parts: &[BufId]) -> BufId {
        assert!(!parts.is_empty());
        let m = self.bufs[parts[0]].rows;
        let total: usize = parts.iter().map(|&p| self.bufs[p].cols).sum();
        for &p in parts {
            assert_eq!(self.bufs[p].rows, m, "concat row counts");
        }
        let out = self.out_like(m, total, parts);
        let mut off = 0;
        for &p in parts {
            let n = self.bufs[p].cols;
            for r in 0..m {
                for c in 0..n {
                    let v = self.bufs[p].data[r * n + c];
                    self.bufs[out].data[r * total + off + c] = v;
                }
            }
            off += n;
        }
        self.ops.push(Op::Concat { parts: parts.to_vec(), out });
        out
    }

    pub fn slice_cols(&mut self, a: BufId, from: usize, to: usize) -> BufId {
        let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
        assert!(from < to && to <= n, "slice range {from}..{to} of {n}");
        let w = to - from;
        let out = self.out_like(m, w, &[a]);
        for r in 0..m {
            for c in 0..w {
                self.bufs[out].data[r * w + c] = self.bufs[a].data[r * n + from + c];
            }
        }
        self.ops.push(Op::SliceCols { a, from, out });
        out
    }

    /// Per-row element pick: `out[r] = a[r, idx[r]]`.
    pub fn gather_cols(&mut self, a: BufId, idx: &[u32]) -> BufId {
        let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
        assert_eq!(idx.len(), m, "one index per row");
        let out = self.out_like(m, 1, &[a]);
        for r in 0..m {
            assert!((idx[r] as usize) < n);
            self.bufs[out].data[r] = self.bufs[a].data[r * n + idx[r] as usize];
        }
        self.ops.push(Op::GatherCols { a, idx: idx.to_vec(), out });
        out
    }

    /// Multiply each row by a fixed coefficient (constants, not differentiated).
    pub fn row_scale(&mut self, a: BufId, coef: &[S]) -> BufId {
        let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
        assert_eq!(coef.len(), m, "one coefficient per row");
        let out = self.out_like(m, n, &[a]);
        for r in 0..m {
            for c in 0..n {
                self.bufs[out].data[r * n + c] = self.bufs[a].data[r * n + c] * coef[r];
            }
        }
        self.ops.push(Op::RowScale { a, coef: coef.to_vec(), out });
        out
    }

    pub fn sum_cols(&mut self, a: BufId) -> BufId {
        let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
        let out = self.out_like(m, 1, &[a]);
        for r in 0..m {
            self.bufs[out].data[r] = self.bufs[a].data[r * n..(r + 1) * n].iter().cloned().sum();
        }
        self.ops.push(Op::SumCols { a, out });
        out
    }

    pub fn mean_all(&mut self, a: BufId) -> BufId {
        let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
        assert!(m * n > 0);
        let out = self.out_like(1, 1, &[a]);
        let s: S = self.bufs[a].data.iter().cloned().sum();
        self.bufs[out].data[0] = s / S::of((m * n) as f64);
        self.ops.push(Op::MeanAll { a, out });
        out
    }

    pub fn sum_all(&mut self, a: BufId) -> BufId {
        let out = self.out_like(1, 1, &[a]);
        self.bufs[out].data[0] = self.bufs[a].data.iter().cloned().sum();
        self.ops.push(Op::SumAll { a, out });
        out
    }

    /// 3x3 valid-padding stride-1 patch extraction. Input rows are
    /// channel-major images `chans*h*w`; output has one row per output pixel,
    /// `batch*(h-2)*(w-2)` rows of width `chans*9`.
    pub fn im2col3(&mut self, a: BufId, chans: usize, h: usize, w: usize) -> BufId {
        let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
        assert_eq!(n, chans * h * w, "image layout");
        assert!(h >= 3 && w >= 3, "conv input smaller than kernel");
        let (oh, ow) = (h - 2, w - 2);
        let out = self.out_like(m * oh * ow, chans * 9, &[a]);
        let width = chans * 9;
        let (head, tail) = self.bufs.split_at_mut(out);
        for b in 0..m {
            let img = &head[a].data[b * n..(b + 1) * n];
            let base = b * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (base + oy * ow + ox) * width;
                    for ch in 0..chans {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let v = img[ch * h * w + (oy + ky) * w + (ox + kx)];
                                tail[0].data[row + ch * 9 + ky * 3 + kx] = v;
                            }
                        }
                    }
                }
            }
        }
        self.ops.push(Op::Im2col { a, chans, h, w, out });
        out
    }

    /// Regroup matmul output rows (one per pixel) back into image rows:
    /// `out[b, c*positions + p] = a[b*positions + p, c]`.
    pub fn pixels_to_images(&mut self, a: BufId, batch: usize, positions: usize) -> BufId {
        let (m, chans) = (self.bufs[a].rows, self.bufs[a].cols);
        assert_eq!(m, batch * positions, "pixel rows");
        let out = self.out_like(batch, chans * positions, &[a]);
        for b in 0..batch {
            for p in 0..positions {
                for c in 0..chans {
                    let v = self.bufs[a].data[(b * positions + p) * chans + c];
                    self.bufs[out].data[b * chans * positions + c * positions + p] = v;
                }
            }
        }
        self.ops.push(Op::PixelsToImages { a, positions, chans, out });
        out
    }

    /// 2x2 max pooling, stride 2, channel-major image rows. Odd trailing rows
    /// or columns are dropped.
    pub fn max_pool2(&mut self, a: BufId, chans: usize, h: usize, w: usize) -> BufId {
        let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
        assert_eq!(n, chans * h * w, "image layout");
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh > 0 && ow > 0);
        let out = self.out_like(m, chans * oh * ow, &[a]);
        let mut idx = vec![0u32; m * chans * oh * ow];
        let (head, tail) = self.bufs.split_at_mut(out);
        for b in 0..m {
            let img = &head[a].data[b * n..(b + 1) * n];
            for ch in 0..chans {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = ch * h * w + (2 * oy) * w + 2 * ox;
                        let mut bv = img[best];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let at = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                            if img[at] > bv {
                                bv = img[at];
                                best = at;
                            }
                        }
                        let o = b * chans * oh * ow + ch * oh * ow + oy * ow + ox;
                        tail[0].data[o] = bv;
                        idx[o] = best as u32;
                    }
                }
            }
        }
        self.ops.push(Op::MaxPool2 { a, idx, out });
        out
    }

    /// Inverted dropout: `mask` entries are 0 (dropped) or 1/keep.
    pub fn dropout(&mut self, a: BufId, mask: Vec<S>) -> BufId {
        let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
        assert_eq!(mask.len(), m * n);
        let out = self.out_like(m, n, &[a]);
        for i in 0..m * n {
            self.bufs[out].data[i] = self.bufs[a].data[i] * mask[i];
        }
        self.ops.push(Op::Dropout { a, mask, out });
        out
    }

    /// Binarize to {-1, +1} with the surrogate backward of tanh: forward is
    /// `2*[tanh(x) > 0] - 1` (so exactly 0 maps to -1), backward multiplies the
    /// upstream gradient by `1 - tanh(x)^2`.
    pub fn sign_ste(&mut self, a: BufId) -> BufId {
        let out = self.map1(a, |x| if x.tanh() > S::zero() { S::one() } else { -S::one() });
        self.ops.push(Op::SignSte { a, out });
        out
    }

    /// Logistic of a noised pre-activation: `y = logistic(x + sigma*noise)`;
    /// backward is the logistic derivative at the noised point, `y*(1-y)`.
    pub fn logistic_noise(&mut self, a: BufId, sigma: S, noise: Vec<S>) -> BufId {
        let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
        assert_eq!(noise.len(), m * n);
        let out = self.out_like(m, n, &[a]);
        for i in 0..m * n {
            let z = self.bufs[a].data[i] + sigma * noise[i];
            self.bufs[out].data[i] = S::one() / (S::one() + (-z).exp());
        }
        self.ops.push(Op::LogisticNoise { a, out });
        out
    }

    /// Build per-sender padded-and-tagged message rows. `heads[k]` holds the
    /// candidate payload rows for the k-th nonzero size; `choice[r]` picks the
    /// head whose row `r` was actually sent (-1 for silence), and `slot[r]` is
    /// the index of the one-hot size flag to set (-1 sets none). Output width
    /// is `payload_width + slot_width` where slot_width is taken from `slots`.
    pub fn assemble_messages(
        &mut self,
        heads: &[BufId],
        choice: &[i32],
        slot: &[i32],
        payload_width: usize,
        slot_width: usize,
    ) -> BufId {
        assert!(!heads.is_empty() || choice.iter().all(|&c| c < 0));
        let m = choice.len();
        assert_eq!(slot.len(), m);
        for &h in heads {
            assert_eq!(self.bufs[h].rows, m, "head row count");
            assert!(self.bufs[h].cols <= payload_width, "payload wider than pad");
        }
        let width = payload_width + slot_width;
        let out = self.out_like(m, width, heads);
        for r in 0..m {
            if choice[r] >= 0 {
                let h = heads[choice[r] as usize];
                let hc = self.bufs[h].cols;
                for c in 0..hc {
                    self.bufs[out].data[r * width + c] = self.bufs[h].data[r * hc + c];
                }
            }
            if slot[r] >= 0 {
                assert!((slot[r] as usize) < slot_width);
                self.bufs[out].data[r * width + payload_width + slot[r] as usize] = S::one();
            }
        }
        self.ops.push(Op::AssembleMessages { heads: heads.to_vec(), choice: choice.to_vec(), out });
        out
    }

    /// Linear mixing within consecutive row blocks of size `group`:
    /// `out[g*group + i] = sum_j weights[(g*group + i)*group + j] * a[g*group + j]`.
    /// Weights are constants (delivery masks and averaging factors).
    pub fn block_row_mix(&mut self, a: BufId, group: usize, weights: &[S]) -> BufId {
        let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
        assert!(group > 0 && m % group == 0, "rows {m} not divisible into groups of {group}");
        assert_eq!(weights.len(), m * group, "one weight row per output row");
        let out = self.out_like(m, n, &[a]);
        for g in 0..m / group {
            for i in 0..group {
                let or = g * group + i;
                for j in 0..group {
                    let wgt = weights[or * group + j];
                    if wgt != S::zero() {
                        let ar = g * group + j;
                        for c in 0..n {
                            let v = self.bufs[out].data[or * n + c] + wgt * self.bufs[a].data[ar * n + c];
                            self.bufs[out].data[or * n + c] = v;
                        }
                    }
                }
            }
        }
        self.ops.push(Op::BlockRowMix { a, group, weights: weights.to_vec(), out });
        out
    }

    // ── backward ─────────────────────────────────────────────────────────

    pub fn backward(&self, loss: BufId) -> Gradients<S> {
        assert_eq!(
            (self.bufs[loss].rows, self.bufs[loss].cols),
            (1, 1),
            "backward seed must be scalar"
        );
        let mut g: Vec<Option<Vec<S>>> = vec![None; self.bufs.len()];
        g[loss] = Some(vec![S::one()]);
        for op in self.ops.iter().rev() {
            self.backprop(op, &mut g);
        }
        Gradients { g }
    }

    fn wants(&self, id: BufId) -> bool {
        self.bufs[id].needs_grad
    }

    fn acc<'a>(&self, g: &'a mut Vec<Option<Vec<S>>>, id: BufId) -> &'a mut Vec<S> {
        let len = self.bufs[id].data.len();
        g[id].get_or_insert_with(|| vec![S::zero(); len])
    }

    fn backprop(&self, op: &Op<S>, g: &mut Vec<Option<Vec<S>>>) {
        match op {
            &Op::Matmul { a, b, out } => {
                let Some(go) = g[out].take() else { return };
                let (m, k) = (self.bufs[a].rows, self.bufs[a].cols);
                let n = self.bufs[b].cols;
                if self.wants(a) {
                    let bd = &self.bufs[b].data;
                    // da += go @ b^T
                    let da = self.acc(g, a);
                    gemm(false, true, m, n, k, S::one(), &go, bd, S::one(), da);
                }
                if self.wants(b) {
                    let ad = &self.bufs[a].data;
                    // db += a^T @ go
                    let db = self.acc(g, b);
                    gemm(true, false, k, m, n, S::one(), ad, &go, S::one(), db);
                }
                g[out] = Some(go);
            }
            &Op::AddRow { a, bias, out } => {
                let Some(go) = g[out].take() else { return };
                let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
                if self.wants(a) {
                    let da = self.acc(g, a);
                    for i in 0..m * n {
                        da[i] = da[i] + go[i];
                    }
                }
                if self.wants(bias) {
                    let db = self.acc(g, bias);
                    for r in 0..m {
                        for c in 0..n {
                            db[c] = db[c] + go[r * n + c];
                        }
                    }
                }
                g[out] = Some(go);
            }
            &Op::Add { a, b, out } => {
                let Some(go) = g[out].take() else { return };
                for (id, sign) in [(a, S::one()), (b, S::one())] {
                    if self.wants(id) {
                        let d = self.acc(g, id);
                        for i in 0..go.len() {
                            d[i] = d[i] + sign * go[i];
                        }
                    }
                }
                g[out] = Some(go);
            }
            &Op::Sub { a, b, out } => {
                let Some(go) = g[out].take() else { return };
                for (id, sign) in [(a, S::one()), (b, -S::one())] {
                    if self.wants(id) {
                        let d = self.acc(g, id);
                        for i in 0..go.len() {
                            d[i] = d[i] + sign * go[i];
                        }
                    }
                }
                g[out] = Some(go);
            }
            &Op::Mul { a, b, out } => {
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let bd = &self.bufs[b].data;
                    let da = self.acc(g, a);
                    for i in 0..go.len() {
                        da[i] = da[i] + go[i] * bd[i];
                    }
                }
                if self.wants(b) {
                    let ad = &self.bufs[a].data;
                    let db = self.acc(g, b);
                    for i in 0..go.len() {
                        db[i] = db[i] + go[i] * ad[i];
                    }
                }
                g[out] = Some(go);
            }
            &Op::Scale { a, c, out } => {
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let da = self.acc(g, a);
                    for i in 0..go.len() {
                        da[i] = da[i] + c * go[i];
                    }
                }
                g[out] = Some(go);
            }
            &Op::Relu { a, out } => {
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let y = &self.bufs[out].data;
                    let da = self.acc(g, a);
                    for i in 0..go.len() {
                        if y[i] > S::zero() {
                            da[i] = da[i] + go[i];
                        }
                    }
                }
                g[out] = Some(go);
            }
            &Op::Tanh { a, out } => {
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let y = &self.bufs[out].data;
                    let da = self.acc(g, a);
                    for i in 0..go.len() {
                        da[i] = da[i] + go[i] * (S::one() - y[i] * y[i]);
                    }
                }
                g[out] = Some(go);
            }
            &Op::Sigmoid { a, out } => {
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let y = &self.bufs[out].data;
                    let da = self.acc(g, a);
                    for i in 0..go.len() {
                        da[i] = da[i] + go[i] * y[i] * (S::one() - y[i]);
                    }
                }
                g[out] = Some(go);
            }
            &Op::SoftmaxRows { a, out } => {
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
                    let y = &self.bufs[out].data;
                    let da = self.acc(g, a);
                    for r in 0..m {
                        let mut dot = S::zero();
                        for c in 0..n {
                            dot = dot + go[r * n + c] * y[r * n + c];
                        }
                        for c in 0..n {
                            let i = r * n + c;
                            da[i] = da[i] + y[i] * (go[i] - dot);
                        }
                    }
                }
                g[out] = Some(go);
            }
            &Op::LogSoftmaxRows { a, out } => {
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
                    let y = &self.bufs[out].data;
                    let da = self.acc(g, a);
                    for r in 0..m {
                        let gsum: S = go[r * n..(r + 1) * n].iter().cloned().sum();
                        for c in 0..n {
                            let i = r * n + c;
                            da[i] = da[i] + go[i] - y[i].exp() * gsum;
                        }
                    }
                }
                g[out] = Some(go);
            }
            Op::Concat { parts, out } => {
                let out = *out;
                let Some(go) = g[out].take() else { return };
                let m = self.bufs[out].rows;
                let total = self.bufs[out].cols;
                let mut off = 0;
                for &p in parts {
                    let n = self.bufs[p].cols;
                    if self.wants(p) {
                        let dp = self.acc(g, p);
                        for r in 0..m {
                            for c in 0..n {
                                dp[r * n + c] = dp[r * n + c] + go[r * total + off + c];
                            }
                        }
                    }
                    off += n;
                }
                g[out] = Some(go);
            }
            &Op::SliceCols { a, from, out } => {
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let n = self.bufs[a].cols;
                    let w = self.bufs[out].cols;
                    let m = self.bufs[out].rows;
                    let da = self.acc(g, a);
                    for r in 0..m {
                        for c in 0..w {
                            da[r * n + from + c] = da[r * n + from + c] + go[r * w + c];
                        }
                    }
                }
                g[out] = Some(go);
            }
            Op::GatherCols { a, idx, out } => {
                let (a, out) = (*a, *out);
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let n = self.bufs[a].cols;
                    let da = self.acc(g, a);
                    for (r, &ix) in idx.iter().enumerate() {
                        da[r * n + ix as usize] = da[r * n + ix as usize] + go[r];
                    }
                }
                g[out] = Some(go);
            }
            Op::RowScale { a, coef, out } => {
                let (a, out) = (*a, *out);
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let n = self.bufs[a].cols;
                    let da = self.acc(g, a);
                    for (r, &cf) in coef.iter().enumerate() {
                        for c in 0..n {
                            da[r * n + c] = da[r * n + c] + cf * go[r * n + c];
                        }
                    }
                }
                g[out] = Some(go);
            }
            &Op::SumCols { a, out } => {
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
                    let da = self.acc(g, a);
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] = da[r * n + c] + go[r];
                        }
                    }
                }
                g[out] = Some(go);
            }
            &Op::MeanAll { a, out } => {
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let len = self.bufs[a].data.len();
                    let s = go[0] / S::of(len as f64);
                    let da = self.acc(g, a);
                    for v in da.iter_mut() {
                        *v = *v + s;
                    }
                }
                g[out] = Some(go);
            }
            &Op::SumAll { a, out } => {
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let da = self.acc(g, a);
                    for v in da.iter_mut() {
                        *v = *v + go[0];
                    }
                }
                g[out] = Some(go);
            }
            &Op::Im2col { a, chans, h, w, out } => {
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let m = self.bufs[a].rows;
                    let (oh, ow) = (h - 2, w - 2);
                    let width = chans * 9;
                    let da = self.acc(g, a);
                    for b in 0..m {
                        let base = b * oh * ow;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let row = (base + oy * ow + ox) * width;
                                for ch in 0..chans {
                                    for ky in 0..3 {
                                        for kx in 0..3 {
                                            let at = b * chans * h * w + ch * h * w + (oy + ky) * w + ox + kx;
                                            da[at] = da[at] + go[row + ch * 9 + ky * 3 + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                g[out] = Some(go);
            }
            &Op::PixelsToImages { a, positions, chans, out } => {
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let batch = self.bufs[out].rows;
                    let da = self.acc(g, a);
                    for b in 0..batch {
                        for p in 0..positions {
                            for c in 0..chans {
                                let di = (b * positions + p) * chans + c;
                                da[di] = da[di] + go[b * chans * positions + c * positions + p];
                            }
                        }
                    }
                }
                g[out] = Some(go);
            }
            Op::MaxPool2 { a, idx, out } => {
                let (a, out) = (*a, *out);
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let n = self.bufs[a].cols;
                    let on = self.bufs[out].cols;
                    let da = self.acc(g, a);
                    for (o, &src) in idx.iter().enumerate() {
                        let b = o / on;
                        da[b * n + src as usize] = da[b * n + src as usize] + go[o];
                    }
                }
                g[out] = Some(go);
            }
            Op::Dropout { a, mask, out } => {
                let (a, out) = (*a, *out);
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let da = self.acc(g, a);
                    for i in 0..go.len() {
                        da[i] = da[i] + go[i] * mask[i];
                    }
                }
                g[out] = Some(go);
            }
            &Op::SignSte { a, out } => {
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let x = &self.bufs[a].data;
                    let da = self.acc(g, a);
                    for i in 0..go.len() {
                        let t = x[i].tanh();
                        da[i] = da[i] + go[i] * (S::one() - t * t);
                    }
                }
                g[out] = Some(go);
            }
            Op::LogisticNoise { a, out, .. } => {
                let (a, out) = (*a, *out);
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let y = &self.bufs[out].data;
                    let da = self.acc(g, a);
                    for i in 0..go.len() {
                        da[i] = da[i] + go[i] * y[i] * (S::one() - y[i]);
                    }
                }
                g[out] = Some(go);
            }
            Op::AssembleMessages { heads, choice, out } => {
                let out = *out;
                let Some(go) = g[out].take() else { return };
                let width = self.bufs[out].cols;
                for (r, &ch) in choice.iter().enumerate() {
                    if ch >= 0 {
                        let h = heads[ch as usize];
                        if self.wants(h) {
                            let hc = self.bufs[h].cols;
                            let dh = self.acc(g, h);
                            for c in 0..hc {
                                dh[r * hc + c] = dh[r * hc + c] + go[r * width + c];
                            }
                        }
                    }
                }
                g[out] = Some(go);
            }
            Op::BlockRowMix { a, group, weights, out } => {
                let (a, out, group) = (*a, *out, *group);
                let Some(go) = g[out].take() else { return };
                if self.wants(a) {
                    let (m, n) = (self.bufs[a].rows, self.bufs[a].cols);
                    let da = self.acc(g, a);
                    for gi in 0..m / group {
                        for i in 0..group {
                            let or = gi * group + i;
                            for j in 0..group {
                                let wgt = weights[or * group + j];
                                if wgt != S::zero() {
                                    let ar = gi * group + j;
                                    for c in 0..n {
                                        da[ar * n + c] = da[ar * n + c] + wgt * go[or * n + c];
                                    }
                                }
                            }
                        }
                    }
                }
                g[out] = Some(go);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_forward_and_grads() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t.leaf(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let c = t.matmul(a, b);
        assert_eq!(t.val(c), &[4.0, 5.0, 10.0, 11.0]);
        let l = t.sum_all(c);
        let g = t.backward(l);
        // dl/da = ones @ b^T
        assert_eq!(g.get(a).unwrap(), &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0]);
        assert_eq!(g.get(b).unwrap(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(1, 2, vec![1.0, 2.0]);
        let b = t.leaf(1, 2, vec![3.0, 4.0]);
        let c = t.mul(a, b);
        let l = t.sum_all(c);
        let g = t.backward(l);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(2, 4, vec![0.1, -2.0, 3.0, 0.7, 100.0, 100.5, 99.0, 98.0]);
        let s = t.softmax_rows(a);
        for r in 0..2 {
            let sum: f64 = t.val(s)[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
        let b = t.constant(1, 3, vec![1.0, 2.0, 3.0]);
        let c = t.constant(1, 3, vec![1001.0, 1002.0, 1003.0]);
        let sb = t.softmax_rows(b);
        let sc = t.softmax_rows(c);
        for i in 0..3 {
            assert!((t.val(sb)[i] - t.val(sc)[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn sign_ste_forward_is_strict_on_zero() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(1, 3, vec![0.3, -0.2, 0.0]);
        let s = t.sign_ste(a);
        assert_eq!(t.val(s), &[1.0, -1.0, -1.0]);
        let l = t.sum_all(s);
        let g = t.backward(l);
        let want: Vec<f64> = [0.3f64, -0.2, 0.0].iter().map(|x| 1.0 - x.tanh().powi(2)).collect();
        for (a, b) in g.get(a).unwrap().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_picks_window_maxima() {
        let mut t: Tape<f64> = Tape::new();
        // one 1-channel 4x4 image
        let a = t.leaf(
            1,
            16,
            vec![1.0, 2.0, 0.0, 0.0, 3.0, 4.0, 0.0, 1.0, 0.0, 0.0, 5.0, 6.0, 0.0, 0.0, 8.0, 7.0],
        );
        let p = t.max_pool2(a, 1, 4, 4);
        assert_eq!(t.val(p), &[4.0, 1.0, 0.0, 8.0]);
        let l = t.sum_all(p);
        let g = t.backward(l);
        let da = g.get(a).unwrap();
        assert_eq!(da[5], 1.0); // the 4
        assert_eq!(da[14], 1.0); // the 8
        assert_eq!(da[0], 0.0);
    }

    #[test]
    fn conv_shape_trace_14_to_5() {
        // 14x14 -> conv3 -> 12x12 -> conv3 -> 10x10 -> pool -> 5x5
        let mut t: Tape<f32> = Tape::new();
        let img = t.constant(2, 14 * 14, vec![0.5; 2 * 196]);
        let w1 = t.leaf(9, 16, vec![0.01; 9 * 16]);
        let c1 = t.im2col3(img, 1, 14, 14);
        assert_eq!((t.rows(c1), t.cols(c1)), (2 * 144, 9));
        let o1 = t.matmul(c1, w1);
        let i1 = t.pixels_to_images(o1, 2, 144);
        assert_eq!((t.rows(i1), t.cols(i1)), (2, 16 * 144));
        let c2 = t.im2col3(i1, 16, 12, 12);
        assert_eq!((t.rows(c2), t.cols(c2)), (2 * 100, 144));
        let w2 = t.leaf(144, 32, vec![0.01; 144 * 32]);
        let o2 = t.matmul(c2, w2);
        let i2 = t.pixels_to_images(o2, 2, 100);
        let p = t.max_pool2(i2, 32, 10, 10);
        assert_eq!((t.rows(p), t.cols(p)), (2, 32 * 25));
    }

    #[test]
    fn assemble_and_mix_route_payloads_and_gradients() {
        let mut t: Tape<f64> = Tape::new();
        // two envs x two agents = 4 rows; sizes {0, 1, 2}; heads for 1 and 2
        let h1 = t.leaf(4, 1, vec![0.5, 0.6, 0.7, 0.8]);
        let h2 = t.leaf(4, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        // row 0 silent; row 1 sends size 1; rows 2, 3 send size 2
        let p = t.assemble_messages(&[h1, h2], &[-1, 0, 1, 1], &[-1, 1, 2, 2], 2, 3);
        assert_eq!(t.cols(p), 5);
        assert_eq!(t.val(p)[0..5], [0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.val(p)[5..10], [0.6, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(t.val(p)[10..15], [0.5, 0.6, 0.0, 0.0, 1.0]);
        // weights: recipient rows mix sender rows within each env block;
        // env 0 agent 1 hears nothing because agent 0 stayed silent
        #[rustfmt::skip]
        let w = vec![
            0.0, 1.0, // env0 agent0 <- agent1
            0.0, 0.0, // env0 agent1 <- nothing delivered
            0.0, 1.0, // env1 agent0 <- agent1
            1.0, 0.0, // env1 agent1 <- agent0
        ];
        let mixed = t.block_row_mix(p, 2, &w);
        assert_eq!(t.val(mixed)[0..5], [0.6, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(t.val(mixed)[5..10], [0.0; 5]);
        assert_eq!(t.val(mixed)[10..15], [0.7, 0.8, 0.0, 0.0, 1.0]);
        assert_eq!(t.val(mixed)[15..20], [0.5, 0.6, 0.0, 0.0, 1.0]);
        let l = t.sum_all(mixed);
        let g = t.backward(l);
        // h1 row 1 was delivered once (to env0 agent0)
        assert_eq!(g.get(h1).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
        // h2 rows 2 and 3 each delivered once
        assert_eq!(g.get(h2).unwrap(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn gather_cols_selects_and_scatters() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = t.gather_cols(a, &[2, 0]);
        assert_eq!(t.val(p), &[3.0, 4.0]);
        let l = t.sum_all(p);
        let g = t.backward(l);
        assert_eq!(g.get(a).unwrap(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_mask_applies_to_both_passes() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let d = t.dropout(a, vec![2.0, 0.0, 2.0, 0.0]);
        assert_eq!(t.val(d), &[2.0, 0.0, 6.0, 0.0]);
        let l = t.sum_all(d);
        let g = t.backward(l);
        assert_eq!(g.get(a).unwrap(), &[2.0, 0.0, 2.0, 0.0]);
    }
}
