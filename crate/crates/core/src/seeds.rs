//! Named sub-seeds derived from one root seed, so each random component
//! (world, init, shuffle, dropout, ...) is reproducible on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic seed for the stream `name` under `root` (FNV-1a mix).
pub fn sub_seed(root: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ root.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn sub_rng(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(root, name))
}
