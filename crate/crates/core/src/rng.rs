//! Seeded random number generation.
//!
//! Every stochastic step (weight init, phantoms, patch sampling, flips,
//! shuffling) draws from xoshiro256++, a 64-bit xorshift-family generator,
//! seeded from a `u64` through SplitMix64. Both algorithms are fixed-width
//! integer arithmetic, so streams are identical across platforms.

use rand::SeedableRng;

pub type Rng = rand_xoshiro::Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream for a named sub-task of a seeded run.
pub fn derived(seed: u64, stream: u64) -> Rng {
    seeded(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}
