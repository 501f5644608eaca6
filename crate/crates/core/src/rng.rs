//! Deterministic RNG stream derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream for a `(seed, a, b)` tuple; stable across platforms
/// and releases. Used to give every sample, trajectory, and worker its own
/// reproducible randomness regardless of execution order.
pub fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}
