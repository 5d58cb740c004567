//! Seeded RNG substreams.
//!
//! Every source of randomness (initialization, shuffling, negative sampling,
//! dropout) draws from a named substream derived from the single run seed.
//! Adding a new consumer gets its own name and leaves existing streams
//! untouched, so runs stay reproducible across feature additions.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic RNG for the named substream of `seed`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ fnv1a(name.as_bytes()));
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn same_name_same_stream() {
        let mut a = stream(42, "init");
        let mut b = stream(42, "init");
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn different_names_differ() {
        let mut a = stream(42, "init");
        let mut b = stream(42, "shuffle");
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = stream(1, "init");
        let mut b = stream(2, "init");
        assert_ne!(a.next_u64(), b.next_u64());
    }
}
