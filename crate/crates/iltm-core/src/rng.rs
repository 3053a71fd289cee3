//! Seed derivation and RNG construction.
//!
//! Every random choice in the crate draws from a ChaCha stream whose seed is
//! derived from a base seed plus a list of stream tags. Derivation is a pure
//! function, so any component can be regenerated bit-identically (feature
//! subsets, projection matrices, parameter inits) without storing the values.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with a sequence of stream tags into one 64-bit seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(base);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t));
    }
    s
}

/// Deterministic RNG for the stream identified by (base, tags).
pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Deterministic FNV-1a hash of a byte string; used for config cache keys.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derive_seed_is_deterministic_and_tag_sensitive() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }

    #[test]
    fn rng_streams_reproduce() {
        let a: Vec<f64> = (0..8).map(|_| rng_for(3, &[5]).gen()).collect();
        let b: Vec<f64> = (0..8).map(|_| rng_for(3, &[5]).gen()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn fnv1a_matches_reference_vector() {
        // Standard FNV-1a test vector: empty input hashes to the offset basis.
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_ne!(fnv1a(b"a"), fnv1a(b"b"));
    }
}
