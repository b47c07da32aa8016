//! Seed derivation for independent deterministic random streams.

/// Mixes a run seed with a stream label and an index through splitmix64.
/// The constants are the reference splitmix64 increments, so derived
/// streams do not depend on platform hashers and never drift between
/// builds.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &b in label.as_bytes() {
        h = splitmix64(h ^ b as u64);
    }
    splitmix64(h ^ index)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
