//! Seeded RNG construction. All randomness in the crate flows through
//! ChaCha8 streams derived from user-visible seeds, so every run is
//! reproducible from its seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A fresh deterministic RNG for `seed`.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mix a base seed with stream labels (splitmix64 finalizer), so per-sample
/// and per-epoch streams are independent of consumption order.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a1 = rng_from_seed(derive_seed(7, 1, 2)).next_u64();
        let a2 = rng_from_seed(derive_seed(7, 1, 2)).next_u64();
        let b = rng_from_seed(derive_seed(7, 2, 1)).next_u64();
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
    }
}
