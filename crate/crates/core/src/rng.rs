//! Deterministic seed derivation.
//!
//! Every random object in the crate is drawn from a ChaCha stream whose seed is
//! derived from a base seed and a path of counters, for example
//! `(layer, head, table, hash)`. Two runs with the same base seed therefore
//! sample identical hashes no matter in which order the objects are built.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The splitmix64 finaliser.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds a counter path into a base seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &c| splitmix64(acc ^ splitmix64(c.wrapping_add(0xA5A5_A5A5))))
}

/// A generator for the stream addressed by `path` under `base`.
pub fn stream(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// Seeded 64-bit mixing hash of a word slice.
pub fn mix_words(seed: u64, words: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x51_7C_C1_B7_27_22_0A_95);
    for &w in words {
        h = splitmix64(h ^ w);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_path_sensitive() {
        let a = stream(7, &[1, 2, 3]).next_u64();
        let b = stream(7, &[1, 2, 3]).next_u64();
        let c = stream(7, &[1, 3, 2]).next_u64();
        let d = stream(8, &[1, 2, 3]).next_u64();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn splitmix_known_value() {
        // first output of the reference splitmix64 generator seeded with 0
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }
}
