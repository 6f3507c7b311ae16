//! Deterministic RNG streams.
//!
//! Every random choice in the workspace is derived from an explicit seed plus
//! a stream label, so any run can be reproduced bit-for-bit without carrying
//! RNG state through checkpoints.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Labels for independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Init,
    BatchOrder { epoch: u64 },
    Dropout { step: u64, slot: u64 },
    Sampling { slot: u64 },
    Corpus,
    Phase,
}

impl Stream {
    fn tags(self) -> (u64, u64, u64) {
        match self {
            Stream::Init => (1, 0, 0),
            Stream::BatchOrder { epoch } => (2, epoch, 0),
            Stream::Dropout { step, slot } => (3, step, slot),
            Stream::Sampling { slot } => (4, slot, 0),
            Stream::Corpus => (5, 0, 0),
            Stream::Phase => (6, 0, 0),
        }
    }
}

/// splitmix64 finalizer; decorrelates nearby seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A ChaCha stream for `(seed, stream)`, independent across stream labels.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let (a, b, c) = stream.tags();
    let mixed = mix(seed ^ mix(a) ^ mix(b.wrapping_mul(0x632be59bd9b4e019)) ^ mix(c.rotate_left(17)));
    ChaCha8Rng::seed_from_u64(mixed)
}
