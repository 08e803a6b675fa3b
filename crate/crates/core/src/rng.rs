//! Deterministic seed derivation.
//!
//! Every random decision in the pipeline draws from a ChaCha8 stream whose
//! seed is derived from (base seed, component tag, index). Components never
//! share a stream, so adding draws in one place cannot shift another's.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the base seed, a component tag, and an index.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in base
        .to_le_bytes()
        .iter()
        .chain(tag.as_bytes())
        .chain(index.to_le_bytes().iter())
    {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// ChaCha8 stream for one component of the pipeline.
pub fn component_rng(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}
