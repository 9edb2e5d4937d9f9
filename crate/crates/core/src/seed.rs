//! Seed derivation shared by the batch scheduler and the estimators.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// The splitmix64 output function.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed `i` of `master`: `splitmix64(master + (i + 1) * golden)`.
pub fn derive(master: u64, i: u64) -> u64 {
    splitmix64(master.wrapping_add(i.wrapping_add(1).wrapping_mul(GOLDEN)))
}
