//! Seed-stream derivation.
//!
//! Every source of randomness in the pipeline is a named sub-stream of one
//! top-level seed, so any stage can be re-run in isolation and parallel
//! work (per-prompt rollouts, per-pair noise) never shares generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, 64-bit. Stable across platforms and releases, which matters more
/// here than hash quality.
fn fnv1a(bytes: &[u8], mut hash: u64) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives a generator for the sub-stream `name` of `seed`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    stream_n(seed, name, &[])
}

/// Derives a generator for a sub-stream indexed by `ids` (prompt ids,
/// iteration counters, batch slots).
pub fn stream_n(seed: u64, name: &str, ids: &[u64]) -> ChaCha8Rng {
    let mut h = fnv1a(name.as_bytes(), 0xcbf2_9ce4_8422_2325 ^ seed);
    for &id in ids {
        h = fnv1a(&id.to_le_bytes(), h);
    }
    let mut key = [0u8; 32];
    let mut state = h;
    for chunk in key.chunks_mut(8) {
        state = splitmix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
