//! Seed derivation so that every random stream (init, shuffling, dropout,
//! pair sampling, decoding noise) is a pure function of the base seed and
//! its position in the run.

/// splitmix64 finaliser.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Stream tags keep unrelated consumers of the same base seed apart.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE_CLEAN: u64 = 2;
    pub const SHUFFLE_AUG: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const PAIRS: u64 = 5;
    pub const NOISE: u64 = 6;
    pub const RULES: u64 = 7;
}
