//! Deterministic RNG stream splitting.
//!
//! Every stochastic component draws from a `ChaCha8Rng` derived from a master
//! seed plus a `(stream, substream)` tag. Derivation is a pure hash, so two
//! streams with different tags are independent of the order in which they are
//! consumed. This is what makes parallel Monte-Carlo draws and concurrent
//! per-device local SGD reproducible regardless of thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent RNG from `(seed, stream, substream)`.
pub fn split(seed: u64, stream: u64, substream: u64) -> ChaCha8Rng {
    let mut state = seed ^ 0xa076_1d64_78bd_642f;
    let a = splitmix64(&mut state);
    state ^= stream.wrapping_mul(0xe703_7ed1_a0b4_28db);
    let b = splitmix64(&mut state);
    state ^= substream.wrapping_mul(0x8ebc_6af0_9c88_c6e3);
    let c = splitmix64(&mut state);
    let d = splitmix64(&mut state);

    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..32].copy_from_slice(&d.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
