//! Seedable counter-style RNG streams.
//!
//! Every randomized operation derives its own ChaCha stream from a base seed
//! plus a stream id, so independent trials are reproducible and can run in
//! parallel without sharing generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby (seed, stream) pairs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Collapses a (seed, stream) pair into a single derived seed, for handing a
/// per-item seed to an operation that does its own stream derivation.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    mix(seed ^ mix(stream.wrapping_add(0xa5a5_a5a5)))
}

/// Derives an independent generator for (`seed`, `stream`).
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = seed ^ mix(stream);
    for chunk in key.chunks_mut(8) {
        state = mix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
