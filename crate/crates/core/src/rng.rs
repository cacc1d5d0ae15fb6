//! Seeding conventions.
//!
//! Every random quantity in this crate flows from a single `u64` master seed
//! through [`derive_seed`], so results are reproducible regardless of thread
//! count or evaluation order. The stream generator is ChaCha8 from
//! `rand_chacha`, which is stable across platforms for a fixed seed.
//!
//! Counter conventions used by the simulation harness:
//! counter 0 generates the population, counter r (r >= 1) drives replication r.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive an independent stream seed from a master seed and a counter.
///
/// SplitMix64 finalizer applied to `base + counter * GOLDEN`. Distinct
/// counters give well-separated seeds even for adjacent integers.
pub fn derive_seed(base: u64, counter: u64) -> u64 {
    const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut z = base.wrapping_add(counter.wrapping_mul(GOLDEN));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The crate-wide stream generator, constructed from a derived seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_deterministic_and_separates_counters() {
        assert_eq!(derive_seed(42, 0), derive_seed(42, 0));
        assert_ne!(derive_seed(42, 0), derive_seed(42, 1));
        assert_ne!(derive_seed(42, 1), derive_seed(43, 1));
        // Hamming distance between adjacent counters should be substantial.
        let x = derive_seed(7, 100) ^ derive_seed(7, 101);
        assert!(x.count_ones() > 10);
    }

    #[test]
    fn stream_reproduces_for_equal_seeds() {
        use rand::RngCore;
        let mut a = stream(derive_seed(1, 2));
        let mut b = stream(derive_seed(1, 2));
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}
