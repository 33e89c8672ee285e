//! Deterministic RNG substream derivation.
//!
//! Every stochastic operation in the crate takes an explicit RNG. Substreams
//! are derived from a master seed plus a list of context components (epoch,
//! instance index, phase tag, ...) so that work can be parallelized across
//! instances and resumed at epoch boundaries without serializing RNG state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used throughout the crate. ChaCha8 is seedable, portable and
/// stream-stable across platforms.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and context components.
pub fn derive_seed(master: u64, context: &[u64]) -> u64 {
    let mut state = splitmix64(master ^ 0xa076_1d64_78bd_642f);
    for &c in context {
        state = splitmix64(state ^ splitmix64(c));
    }
    state
}

/// Builds a ChaCha8 stream for a derived context.
pub fn derive_rng(master: u64, context: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, context))
}

/// Stable 64-bit tag for a string label, for mixing names into contexts.
pub fn tag(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
