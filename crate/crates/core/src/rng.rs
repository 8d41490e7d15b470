//! Seed derivation for reproducible sub-streams.
//!
//! Every stochastic component draws from its own named stream derived from a
//! single root seed, so changing how often one component samples never
//! perturbs another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed, a stream name and an index.
pub fn derive_seed(root: u64, name: &str, index: u64) -> u64 {
    let mut h = splitmix64(root ^ 0x517cc1b727220a95);
    for b in name.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ index.wrapping_mul(0x2545f4914f6cdd1d))
}

/// A seeded generator for the named stream.
pub fn substream(root: u64, name: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(root, name, 0))
}

/// A seeded generator for element `index` of the named stream.
pub fn substream_indexed(root: u64, name: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(root, name, index))
}
