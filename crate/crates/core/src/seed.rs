//! Deterministic seed derivation. Every random stream in a run is keyed off
//! one base seed plus a purpose tag and an index.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base`, a purpose `tag` and an `index` into an independent seed.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = mix(base.wrapping_add(GOLDEN));
    for b in tag.bytes() {
        h = mix(h ^ u64::from(b)).wrapping_add(GOLDEN);
    }
    mix(h ^ index.wrapping_mul(GOLDEN))
}
