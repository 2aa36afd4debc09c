//! Seed derivation. Child seeds are a pure function of their parents, so any
//! sub-stream can be reproduced without replaying the ones before it.

/// SplitMix64 finalizer.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a seed with a stream index.
pub fn mix(seed: u64, stream: u64) -> u64 {
    splitmix(splitmix(seed) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Stable hash of a token sequence.
pub fn hash_tokens(tokens: &[u32]) -> u64 {
    tokens
        .iter()
        .fold(splitmix(tokens.len() as u64), |h, &t| splitmix(h ^ u64::from(t)))
}
