//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha20 stream whose seed is
//! derived from a root seed plus explicit stream labels (epoch index, sample
//! index, purpose tag, …). Deriving rather than sharing one generator makes
//! results independent of evaluation order and lets any draw be reproduced
//! in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Mix the parts into a single 64-bit seed.
///
/// SplitMix64 finalization over a running state; empty input is allowed and
/// yields a fixed constant. Single-bit changes in any part flip about half
/// of the output bits, so `[seed, 0, 1]` and `[seed, 1, 0]` land in
/// unrelated streams.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        state = state.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        state = splitmix(state);
    }
    splitmix(state)
}

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ChaCha20 generator for the stream named by `parts`.
pub fn rng_from(parts: &[u64]) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn same_parts_same_stream() {
        let mut a = rng_from(&[7, 3, 1]);
        let mut b = rng_from(&[7, 3, 1]);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn order_of_parts_matters() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_ne!(derive_seed(&[0, 1]), derive_seed(&[1, 0]));
    }

    #[test]
    fn nearby_seeds_do_not_collide() {
        let mut seen = std::collections::HashSet::new();
        for root in 0..64u64 {
            for tag in 0..64u64 {
                assert!(seen.insert(derive_seed(&[root, tag])));
            }
        }
    }
}
