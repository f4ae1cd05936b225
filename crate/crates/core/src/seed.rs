//! Deterministic derivation of independent RNG streams from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random streams. Each consumer draws from its own stream so that
/// changing one stage (say, the fine-tuning split) never perturbs another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Vocab,
    Sentences,
    Split,
    Init,
    PowerIteration,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Vocab => 0x766f_6361_6200_0001,
            Stream::Sentences => 0x7365_6e74_0000_0002,
            Stream::Split => 0x7370_6c69_7400_0003,
            Stream::Init => 0x696e_6974_0000_0004,
            Stream::PowerIteration => 0x706f_7765_7200_0005,
        }
    }
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, stream: Stream) -> u64 {
    mix(mix(seed) ^ stream.tag())
}

pub fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream))
}
