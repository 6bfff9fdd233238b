//! Deterministic seed derivation for parallel Monte-Carlo work.
//!
//! Replicates and simulation shards derive their own seed from the master
//! seed and their index, so results are independent of thread count and
//! chunking while staying fully reproducible.

/// SplitMix64-style mixing of a master seed and a stream index.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
