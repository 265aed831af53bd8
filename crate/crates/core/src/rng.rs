//! Seed derivation and reproducible RNG construction.
//!
//! Every stochastic component takes a `u64` seed and derives independent
//! substreams through `derive`, so that e.g. weight initialization, batch
//! shuffling, and attack restarts never share or reorder draws. Results are
//! identical across runs and across `--threads` settings because per-item
//! seeds depend only on (base seed, stream label, item index).

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Labels for the independent random streams used across the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    WeightInit,
    Shuffle,
    Attack,
    Data,
    Probe,
    Verify,
    Augment,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::WeightInit => 0x57_49,
            Stream::Shuffle => 0x53_48,
            Stream::Attack => 0x41_54,
            Stream::Data => 0x44_41,
            Stream::Probe => 0x50_52,
            Stream::Verify => 0x56_45,
            Stream::Augment => 0x41_55,
        }
    }
}

/// splitmix64 finalizer; decorrelates nearby seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministically derive a sub-seed for (base, stream, index).
pub fn derive_seed(base: u64, stream: Stream, index: u64) -> u64 {
    mix(mix(base ^ stream.tag().rotate_left(32)) ^ index)
}

/// RNG for a derived stream.
pub fn rng(base: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}
