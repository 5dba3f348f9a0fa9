//! 64-bit avalanche hashing used for filter addressing and seed derivation.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer. Every input bit affects every output bit.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes `seed ‖ bytes` by absorbing 8-byte little-endian words through
/// [`mix64`]; the length is folded in last so prefixes do not collide.
pub fn hash_bytes(seed: u64, bytes: &[u8]) -> u64 {
    let mut state = mix64(seed.wrapping_add(GOLDEN));
    let mut chunks = bytes.chunks_exact(8);
    for chunk in &mut chunks {
        let word = u64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        state = mix64(state ^ word).wrapping_add(GOLDEN);
    }
    let rem = chunks.remainder();
    if !rem.is_empty() {
        let mut buf = [0u8; 8];
        buf[..rem.len()].copy_from_slice(rem);
        state = mix64(state ^ u64::from_le_bytes(buf)).wrapping_add(GOLDEN);
    }
    mix64(state ^ (bytes.len() as u64))
}
