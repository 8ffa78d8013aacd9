//! Digit classification from partial views.
//!
//! Each episode takes one image, cuts it into non-overlapping per-agent
//! crops, and runs two steps: a communication step (rewards all zero) and a
//! prediction step (reward +1 for the right digit, -1 otherwise). Accuracy
//! relates to mean return as `acc = (ret + 1) / 2`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mnist::{Partition, SIDE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Fixed agent-to-crop assignment for a (vertical, horizontal) split pair.
///
/// `v` splits cut the image into `v+1` horizontal bands, `h` splits into
/// `h+1` vertical bands; crops are listed row-major and agent i always gets
/// crop i. When 28 does not divide evenly the last band takes the remainder,
/// and every view is zero-padded (bottom/right) to the largest crop so one
/// network shape serves all agents.
#[derive(Clone, Debug)]
pub struct ViewAssignment {
    pub v: usize,
    pub h: usize,
    pub rects: Vec<Rect>,
    /// Padded common view shape.
    pub view_rows: usize,
    pub view_cols: usize,
}

fn bands(parts: usize) -> Vec<(usize, usize)> {
    let base = SIDE / parts;
    (0..parts)
        .map(|i| {
            let start = i * base;
            let len = if i + 1 == parts { SIDE - start } else { base };
            (start, len)
        })
        .collect()
}

impl ViewAssignment {
    pub fn new(v: usize, h: usize) -> Self {
        let rows = bands(v + 1);
        let cols = bands(h + 1);
        let mut rects = Vec::with_capacity(rows.len() * cols.len());
        for &(top, r) in &rows {
            for &(left, c) in &cols {
                rects.push(Rect { top, left, rows: r, cols: c });
            }
        }
        let view_rows = rows.iter().map(|&(_, r)| r).max().unwrap();
        let view_cols = cols.iter().map(|&(_, c)| c).max().unwrap();
        ViewAssignment { v, h, rects, view_rows, view_cols }
    }

    pub fn n_agents(&self) -> usize {
        self.rects.len()
    }

    pub fn view_len(&self) -> usize {
        self.view_rows * self.view_cols
    }
}

/// Cut raw byte crops (no padding); used by the reassembly property.
pub fn cut_views(image: &[u8], assignment: &ViewAssignment) -> Vec<Vec<u8>> {
    assert_eq!(image.len(), SIDE * SIDE);
    assignment
        .rects
        .iter()
        .map(|r| {
            let mut out = Vec::with_capacity(r.rows * r.cols);
            for y in r.top..r.top + r.rows {
                out.extend_from_slice(&image[y * SIDE + r.left..y * SIDE + r.left + r.cols]);
            }
            out
        })
        .collect()
}

/// A step-synchronous batch of two-step episodes, one image per environment.
///
/// Observation rows are environment-major with agents contiguous inside each
/// environment block, the layout the cross-agent message mixing expects.
pub struct PomnistBatch {
    pub n_envs: usize,
    pub n_agents: usize,
    pub labels: Vec<u8>,
    /// `n_envs * n_agents` rows of padded views scaled to [0,1].
    pub views: Vec<f32>,
    view_len: usize,
}

impl PomnistBatch {
    fn from_indices(part: &Partition, assignment: &ViewAssignment, idx: &[usize]) -> Self {
        let n_agents = assignment.n_agents();
        let view_len = assignment.view_len();
        let mut views = vec![0.0f32; idx.len() * n_agents * view_len];
        let mut labels = Vec::with_capacity(idx.len());
        for (e, &i) in idx.iter().enumerate() {
            labels.push(part.labels[i]);
            let img = part.image(i);
            for (a, r) in assignment.rects.iter().enumerate() {
                let row = &mut views[(e * n_agents + a) * view_len..(e * n_agents + a + 1) * view_len];
                for y in 0..r.rows {
                    for x in 0..r.cols {
                        row[y * assignment.view_cols + x] =
                            img[(r.top + y) * SIDE + (r.left + x)] as f32 / 255.0;
                    }
                }
            }
        }
        PomnistBatch { n_envs: idx.len(), n_agents, labels, views, view_len }
    }

    /// Draw `n_envs` training episodes with replacement.
    pub fn sample(
        part: &Partition,
        assignment: &ViewAssignment,
        n_envs: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if part.count == 0 {
            return Err(Error::config("dataset", "empty partition"));
        }
        let idx: Vec<usize> = (0..n_envs).map(|_| rng.gen_range(0..part.count)).collect();
        Ok(Self::from_indices(part, assignment, &idx))
    }

    /// One episode per sample in `[start, start+count)`, in order; evaluation
    /// walks the whole test partition in chunks this way.
    pub fn exact(part: &Partition, assignment: &ViewAssignment, start: usize, count: usize) -> Result<Self> {
        if start + count > part.count {
            return Err(Error::config("eval", format!("range {start}+{count} exceeds {}", part.count)));
        }
        let idx: Vec<usize> = (start..start + count).collect();
        Ok(Self::from_indices(part, assignment, &idx))
    }

    pub fn obs_rows(&self) -> usize {
        self.n_envs * self.n_agents
    }

    pub fn view_len(&self) -> usize {
        self.view_len
    }

    /// Step-1 rewards, one per observation row: +1 for a correct digit, -1
    /// otherwise. Step-0 rewards are identically zero and have no method.
    pub fn rewards(&self, predictions: &[usize]) -> Result<Vec<f32>> {
        assert_eq!(predictions.len(), self.obs_rows());
        if let Some(&bad) = predictions.iter().find(|&&p| p > 9) {
            return Err(Error::Usage(format!("prediction {bad} outside digit range 0..=9")));
        }
        Ok(predictions
            .iter()
            .enumerate()
            .map(|(r, &p)| if p == self.labels[r / self.n_agents] as usize { 1.0 } else { -1.0 })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mnist::Dataset;
    use crate::rng::{stream, Stream};
    use std::path::Path;

    fn fixture() -> Dataset {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/fixtures/mini-mnist");
        Dataset::load(&dir).unwrap()
    }

    #[test]
    fn split_shapes_match_expected_grids() {
        let a = ViewAssignment::new(1, 1);
        assert_eq!(a.n_agents(), 4);
        assert!(a.rects.iter().all(|r| r.rows == 14 && r.cols == 14));

        let b = ViewAssignment::new(0, 0);
        assert_eq!(b.n_agents(), 1);
        assert_eq!(b.rects[0], Rect { top: 0, left: 0, rows: 28, cols: 28 });

        let c = ViewAssignment::new(0, 1);
        assert_eq!(c.n_agents(), 2);
        assert!(c.rects.iter().all(|r| r.rows == 28 && r.cols == 14));

        // 28 = 9+9+10 with remainder on the last band
        let d = ViewAssignment::new(2, 0);
        assert_eq!(d.rects.iter().map(|r| r.rows).collect::<Vec<_>>(), [9, 9, 10]);
        assert_eq!(d.view_rows, 10);
    }

    #[test]
    fn views_reassemble_bit_exactly() {
        let ds = fixture();
        for (v, h) in [(1, 1), (0, 3), (2, 2), (1, 3)] {
            let a = ViewAssignment::new(v, h);
            let img = ds.train.image(7);
            let views = cut_views(img, &a);
            let mut back = vec![0u8; SIDE * SIDE];
            for (r, view) in a.rects.iter().zip(&views) {
                for y in 0..r.rows {
                    for x in 0..r.cols {
                        back[(r.top + y) * SIDE + (r.left + x)] = view[y * r.cols + x];
                    }
                }
            }
            assert_eq!(&back[..], img);
        }
    }

    #[test]
    fn batches_are_scaled_padded_and_seed_stable() {
        let ds = fixture();
        let a = ViewAssignment::new(2, 0);
        let mut r1 = stream(3, Stream::SampleDraw);
        let mut r2 = stream(3, Stream::SampleDraw);
        let b1 = PomnistBatch::sample(&ds.train, &a, 8, &mut r1).unwrap();
        let b2 = PomnistBatch::sample(&ds.train, &a, 8, &mut r2).unwrap();
        assert_eq!(b1.labels, b2.labels);
        assert_eq!(b1.views, b2.views);
        assert!(b1.views.iter().all(|&p| (0.0..=1.0).contains(&p)));
        // 9-row crops padded to 10 rows: final padded row of any agent-0 view
        // is zero
        let vl = a.view_len();
        let first = &b1.views[..vl];
        assert!(first[9 * a.view_cols..].iter().all(|&p| p == 0.0));
    }

    #[test]
    fn rewards_score_predictions_per_agent() {
        let ds = fixture();
        let a = ViewAssignment::new(1, 1);
        let b = PomnistBatch::exact(&ds.test, &a, 0, 2).unwrap();
        let truth = b.labels.clone();
        // env 0: agents 0,1 right and 2,3 wrong; env 1: all right
        let mut preds = vec![
            truth[0] as usize,
            truth[0] as usize,
            (truth[0] as usize + 1) % 10,
            (truth[0] as usize + 3) % 10,
        ];
        preds.extend(std::iter::repeat(truth[1] as usize).take(4));
        let r = b.rewards(&preds).unwrap();
        assert_eq!(r, vec![1.0, 1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0]);

        assert!(b.rewards(&vec![10; 8]).is_err());
    }

    #[test]
    fn random_predictions_return_about_minus_point_eight() {
        let ds = fixture();
        let a = ViewAssignment::new(0, 0);
        let b = PomnistBatch::exact(&ds.test, &a, 0, 256).unwrap();
        let mut rng = stream(0, Stream::Eval(0));
        let mut total = 0.0;
        let trials = 400;
        for _ in 0..trials {
            let preds: Vec<usize> = (0..b.obs_rows()).map(|_| rng.gen_range(0..10)).collect();
            total += b.rewards(&preds).unwrap().iter().sum::<f32>() / b.obs_rows() as f32;
        }
        let mean = total / trials as f32;
        // binomial std err over 256*400 draws is about 0.002
        assert!((mean - (-0.8)).abs() < 0.01, "mean {mean}");
    }
}
