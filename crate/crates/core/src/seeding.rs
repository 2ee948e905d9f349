//! Named random sub-streams derived from a single run seed.
//!
//! Every random decision in a run draws from one of these streams, so a
//! component (splitting, initialization, shuffling, reservoir insertion) can be
//! replayed on its own without disturbing the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SPLIT: &str = "split";
pub const PARTITION: &str = "partition";
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const RESERVOIR: &str = "reservoir";
pub const MEMORY: &str = "memory";
pub const DATA: &str = "data";

/// Deterministic generator for `(seed, name)`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Deterministic generator for `(seed, name, index)`, e.g. one per task.
pub fn indexed_substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Integer seed for APIs that take a plain `u64`.
pub fn derived_seed(seed: u64, name: &str, index: u64) -> u64 {
    let mut h = fnv1a(name.as_bytes()) ^ seed;
    h = h.wrapping_mul(0x100_0000_01B3) ^ index;
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x100_0000_01B3);
    }
    hash
}
