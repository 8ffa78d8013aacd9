use crate::error::{Error, Result};

use super::params::ParamSet;
use super::scalar::Scalar;

/// Adam with bias correction. Moment buffers are aligned with the param set;
/// a tensor whose gradient is absent in a step keeps its moments and step
/// count untouched.
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: Vec<u64>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(ps: &ParamSet<S>, lr: f64) -> Self {
        let m = (0..ps.len()).map(|i| vec![S::zero(); ps.get(i).data.len()]).collect();
        let v = (0..ps.len()).map(|i| vec![S::zero(); ps.get(i).data.len()]).collect();
        Adam {
            lr: S::of(lr),
            beta1: S::of(0.9),
            beta2: S::of(0.999),
            eps: S::of(1e-8),
            m,
            v,
            t: vec![0; ps.len()],
        }
    }

    pub fn step(&mut self, ps: &mut ParamSet<S>, grads: &[Option<&[S]>]) -> Result<()> {
        assert_eq!(grads.len(), ps.len());
        let one = S::one();
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let p = ps.get_mut(i);
            assert_eq!(g.len(), p.data.len());
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { name: p.name.clone(), context: "gradient update".into() });
            }
            self.t[i] += 1;
            let bc1 = one - self.beta1.powi(self.t[i] as i32);
            let bc2 = one - self.beta2.powi(self.t[i] as i32);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (one - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (one - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p.data[j] = p.data[j] - self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scale the joint gradient down to `max_norm` when its global 2-norm exceeds
/// it. The tiny tolerance on the trigger keeps the operation exactly
/// idempotent under floating-point rounding of the rescale.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Option<Vec<S>>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &x in g {
            sq += x.f64() * x.f64();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm * (1.0 + 1e-6) {
        let s = S::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_about_lr() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.add("p", 1, 1, vec![1.0]);
        let mut opt = Adam::new(&ps, 0.001);
        let g = vec![1.0];
        opt.step(&mut ps, &[Some(&g)]).unwrap();
        let moved = 1.0 - ps.get(0).data[0];
        // bias-corrected first step is lr / (1 + eps-ish)
        assert!((moved - 0.001).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.add("layer.w", 1, 2, vec![0.0, 0.0]);
        let mut opt = Adam::new(&ps, 0.001);
        let g = vec![1.0, f64::NAN];
        let err = opt.step(&mut ps, &[Some(&g)]).unwrap_err();
        assert!(err.to_string().contains("layer.w"), "{err}");
    }

    #[test]
    fn clip_leaves_small_gradients_alone_and_is_idempotent() {
        let mut g = vec![Some(vec![0.3f32, 0.4]), None, Some(vec![1.2f32])];
        let norm = clip_global_norm(&mut g, 10.0);
        assert!((norm - (0.09f64 + 0.16 + 1.44).sqrt()).abs() < 1e-6);
        assert_eq!(g[0].as_ref().unwrap(), &vec![0.3f32, 0.4]);

        let norm2 = clip_global_norm(&mut g, 0.1);
        assert!(norm2 > 0.1);
        let after: Vec<f32> = g.iter().flatten().flatten().copied().collect();
        let mut g2 = g.clone();
        let _ = clip_global_norm(&mut g2, 0.1);
        let after2: Vec<f32> = g2.iter().flatten().flatten().copied().collect();
        assert_eq!(after, after2, "second clip is a no-op");
        let sq: f64 = after.iter().map(|&x| (x as f64) * (x as f64)).sum();
        assert!((sq.sqrt() - 0.1).abs() < 1e-6);
    }
}
