//! Counter-based seed derivation.
//!
//! Parallel tasks get their seeds from `(master, stream, index)` alone, so
//! results do not depend on which thread runs what, or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams used within one split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Split = 0,
    Shuffle = 1,
    CalibrationNoise = 2,
    CalibrationU = 3,
    TestU = 4,
    TestNoise = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream as u64)) ^ index)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
