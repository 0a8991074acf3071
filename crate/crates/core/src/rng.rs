//! Deterministic seed fan-out. Every random stream in a run derives from one
//! root seed plus a component tag, so components stay independent of the
//! order in which other components draw numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gradcore::Fnv1a;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut h = Fnv1a::new();
    h.write(tag.as_bytes());
    mix(root ^ mix(h.finish()))
}

pub fn stream(root: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag))
}
