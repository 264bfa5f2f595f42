//! Seed derivation.
//!
//! Every random consumer (a repetition, a tree, a fold) receives its own
//! ChaCha stream whose seed is derived from a parent seed and a stream index
//! with the splitmix64 finalizer. Streams are therefore independent of the
//! order in which workers pick them up.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// The splitmix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of stream `index` under `parent`: the parent is advanced by
/// `index + 1` splitmix increments and finalized.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    splitmix64(parent.wrapping_add(GOLDEN_GAMMA.wrapping_mul(index.wrapping_add(1))))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(parent: u64, index: u64) -> Rng {
    rng_from_seed(derive_seed(parent, index))
}
