//! Deterministic RNG stream derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream derived from a
//! base seed plus a tag path, so results are reproducible bit-for-bit across
//! runs and independent of execution order. Streams for different tag paths
//! are independent.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream tags. Kept in one place so no two call sites collide.
pub mod tag {
    pub const PARAM_INIT: u64 = 0x01;
    pub const DROPOUT: u64 = 0x02;
    pub const INPUT_NOISE: u64 = 0x03;
    pub const PHANTOM: u64 = 0x04;
    pub const CLIENT_JITTER: u64 = 0x05;
    pub const BATCH_SAMPLING: u64 = 0x06;
    pub const MC_PASS: u64 = 0x07;
    pub const STUDENT_INIT: u64 = 0x08;
    pub const PRETRAIN: u64 = 0x09;
    pub const STUDENT_PASS: u64 = 0x0a;
}

/// Derive a ChaCha8 generator from a base seed and a tag path.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for t in tags {
        hasher.update(t.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

/// Derive a sub-seed (for handing to a component that takes a plain u64).
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for t in tags {
        hasher.update(t.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_path_same_stream() {
        let mut a = derive_rng(7, &[tag::DROPOUT, 3, 1]);
        let mut b = derive_rng(7, &[tag::DROPOUT, 3, 1]);
        let xa: [f64; 4] = std::array::from_fn(|_| a.random());
        let xb: [f64; 4] = std::array::from_fn(|_| b.random());
        assert_eq!(xa, xb);
    }

    #[test]
    fn different_paths_diverge() {
        let mut a = derive_rng(7, &[tag::DROPOUT, 3, 1]);
        let mut b = derive_rng(7, &[tag::DROPOUT, 3, 2]);
        let xa: f64 = a.random();
        let xb: f64 = b.random();
        assert_ne!(xa, xb);
    }

    #[test]
    fn seed_derivation_stable() {
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
    }
}
