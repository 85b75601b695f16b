//! Seed derivation for independent random streams.
//!
//! Every place that fans one seed out into many (dataset records, forest
//! cells, trees within a forest) goes through [`derive`], so parallel units
//! get decorrelated, order-independent streams. The derivation is frozen:
//! changing it would silently change every generated dataset and every
//! trained model.

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of child stream `stream` under `seed`. Mixing before and after the
/// xor keeps consecutive stream ids from producing related seeds.
pub fn derive(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream)
}
