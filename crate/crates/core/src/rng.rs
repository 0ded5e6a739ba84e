//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha8 stream derived from a single
//! seed, so the order in which subsystems draw numbers never couples their results.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Named purposes for independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Rollout = 2,
    Minibatch = 3,
    EvalActions = 4,
    CondOt = 5,
    Evaluation = 6,
    Samples = 7,
}

/// A ChaCha8 generator for `(seed, stream, index)`. `index` separates repeated
/// uses of one purpose, e.g. independent trajectories.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 40) ^ index);
    rng
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_standard_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}
