//! Seed discipline: one base seed per run, one independent ChaCha stream per
//! purpose (and per environment instance where the contract demands it), so
//! that adding draws to one subsystem never shifts another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable stream ids. Environment-instance streams are offset from a base so
/// instance k gets `base + k`.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    ParamInit,
    SampleDraw,
    SizeExploration,
    ActionExploration,
    Dropout,
    MessageNoise,
    EnvChannel(u64),
    EnvDynamics(u64),
    Eval(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::ParamInit => 0,
            Stream::SampleDraw => 1,
            Stream::SizeExploration => 2,
            Stream::ActionExploration => 3,
            Stream::Dropout => 4,
            Stream::MessageNoise => 5,
            Stream::EnvChannel(k) => 1_000 + k,
            Stream::EnvDynamics(k) => 2_000_000 + k,
            Stream::Eval(k) => 4_000_000 + k,
        }
    }
}

/// An rng on the given stream of `seed`. Draw order within one stream is part
/// of the reproducibility contract; callers must consume deterministically.
pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let mut a0 = stream(7, Stream::SampleDraw);
        let mut a1 = stream(7, Stream::SampleDraw);
        let mut b = stream(7, Stream::EnvChannel(0));
        let xs: Vec<u32> = (0..4).map(|_| a0.next_u32()).collect();
        let ys: Vec<u32> = (0..4).map(|_| a1.next_u32()).collect();
        let zs: Vec<u32> = (0..4).map(|_| b.next_u32()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = stream(1, Stream::ParamInit);
        let mut b = stream(2, Stream::ParamInit);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}
