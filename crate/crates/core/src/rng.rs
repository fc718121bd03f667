//! Portable seeded randomness.
//!
//! Every generator in the crate is a `Xoshiro256PlusPlus` seeded through
//! SplitMix64, so streams are byte-identical across platforms. Independent
//! streams are derived from a base seed and a path of labels.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a base seed together with a path of labels.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(base.wrapping_add(GOLDEN_GAMMA)), |h, &p| {
        mix64(h ^ p.wrapping_add(GOLDEN_GAMMA).wrapping_mul(GOLDEN_GAMMA))
    })
}

pub fn rng_from(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, path))
}

/// Stream labels, kept as constants so call sites read as names.
pub mod stream {
    pub const MEANS: u64 = 1;
    pub const SAMPLES: u64 = 2;
    pub const PUBLIC: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const INIT: u64 = 5;
    pub const CLIENT: u64 = 6;
    pub const ORACLE: u64 = 7;
    pub const SEGMENT: u64 = 8;
    pub const SHUFFLE: u64 = 9;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        let a = rng_from(7, &[1, 2]).next_u64();
        let b = rng_from(7, &[1, 2]).next_u64();
        let c = rng_from(7, &[2, 1]).next_u64();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn xoshiro_reference_value() {
        // Pins the generator so a dependency bump cannot silently change data.
        let mut r = Rng::seed_from_u64(0);
        assert_eq!(r.next_u64(), 0x53175d61490b23df);
    }
}
