//! Deterministic seed derivation.
//!
//! Every random draw in the library flows through a ChaCha12 stream seeded
//! by a 64-bit value. Sub-streams (matrix entries, keystream, noise samples,
//! per-trial seeds) are derived from a base seed and a stream tag with
//! splitmix64 so that distinct (base, tag) pairs map to distinct streams on
//! every platform.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

/// Stream tags for the sub-streams hanging off one base seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    MatrixEntries = 1,
    PerturbNoise = 2,
    Keystream = 3,
    SampleNoise = 4,
    PriorMeans = 5,
    DataNoise = 6,
    RandomObservation = 7,
    Distortion = 8,
    Payload = 9,
    NullLatent = 10,
    ExperimentMatrix = 11,
    ExperimentPrior = 12,
    ExperimentKey = 13,
    AttackerPrior = 14,
}

/// splitmix64 finalizer; full-period bijection on u64.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the seed for a tagged sub-stream of `base`.
pub fn derive_seed(base: u64, tag: Stream) -> u64 {
    splitmix64(splitmix64(base) ^ (tag as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Per-trial base seed: `seed_base + trial_id`, mixed so adjacent trials do
/// not produce adjacent ChaCha keys.
pub fn trial_seed(seed_base: u64, trial_id: u64) -> u64 {
    splitmix64(seed_base.wrapping_add(trial_id))
}

/// The one PRNG constructor used everywhere.
pub fn rng_from_seed(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
