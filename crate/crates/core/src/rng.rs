//! Labeled, reproducible RNG substreams.
//!
//! Every consumer of randomness (a design role, a bootstrap run, a replication)
//! draws from its own ChaCha8 stream selected by `(seed, label)`. Adding a new
//! consumer never shifts the numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Deterministic generator for the substream `label` of `seed`.
pub fn substream(seed: u64, label: &str) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_hash(label));
    rng
}

/// Child seed for nested studies, e.g. one campaign seed per replication.
pub fn child_seed(seed: u64, label: &str) -> u64 {
    use rand::RngCore;
    substream(seed, label).next_u64()
}

// FNV-1a, stable across platforms and toolchains.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
