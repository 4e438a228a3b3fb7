//! Seed derivation for independent random streams.

/// Mixes a base seed with a stream tag and an index (splitmix64 finalizer).
pub fn derive(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) const SHUFFLE: u64 = 1;
pub(crate) const MASKING: u64 = 2;
pub(crate) const VALIDATION: u64 = 3;
pub(crate) const SPLIT: u64 = 4;
pub(crate) const HEAD_INIT: u64 = 5;
