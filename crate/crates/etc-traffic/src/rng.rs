//! Seed derivation: every randomized task draws from its own ChaCha stream so
//! results do not depend on scheduling or query order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic RNG for a (root seed, purpose, index) triple.
pub fn derive(root: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut h = root;
    for b in purpose.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    ChaCha8Rng::seed_from_u64(splitmix(h ^ index))
}
