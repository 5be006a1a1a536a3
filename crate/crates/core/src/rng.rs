//! Derived RNG streams. Every trajectory, selection and shuffle draws from
//! its own stream keyed by the run seed and a structured tag, so results do
//! not depend on execution order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into a 64-bit stream seed. Order-sensitive.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, parts))
}

/// Stream domain tags.
pub(crate) mod tag {
    pub const ROLLOUT: u64 = 0x726f_6c6c;
    pub const SELECT: u64 = 0x7365_6c65;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const EVAL: u64 = 0x6576_616c;
    pub const INIT: u64 = 0x696e_6974;
    pub const WORLD: u64 = 0x776f_726c;
    pub const HELD_OUT: u64 = 0x686f_6c64;
}
