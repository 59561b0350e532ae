//! Deterministic seed derivation.
//!
//! Everything downstream of a user seed (shuffles, noise draws, augmentation
//! magnitudes, per-clip synthesis) derives its own stream with [`mix`] so
//! that outputs are reproducible regardless of work ordering. The mixer is a
//! fixed splitmix64 chain — never the std hasher, whose output may change
//! between releases.

/// Splitmix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a sequence of context words.
pub fn mix(base: u64, words: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for &w in words {
        state = splitmix64(state ^ w);
    }
    state
}

/// Mix a string into a seed (stable across platforms and releases).
pub fn mix_str(base: u64, s: &str) -> u64 {
    // FNV-1a over the bytes, then one splitmix round.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in s.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(base, &[h])
}
