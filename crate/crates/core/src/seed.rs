//! Seed derivation. Every random stream in the pipeline is a named child of
//! one root seed, so stages can run in any order or in parallel and still
//! draw the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xxhash_rust::xxh64::xxh64;

pub type Rng = ChaCha8Rng;

pub fn derive_seed(root: u64, tag: &str) -> u64 {
    xxh64(tag.as_bytes(), root)
}

pub fn derive_indexed(root: u64, tag: &str, index: u64) -> u64 {
    xxh64(&index.to_le_bytes(), derive_seed(root, tag))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(root: u64, tag: &str) -> Rng {
    rng(derive_seed(root, tag))
}
