//! Named random substreams derived from a single root seed.
//!
//! Every stochastic component (data, init, shuffle, beam, ...) draws its seed
//! from `derive(root, name)`, so each can be re-run in isolation.

/// Mixes a root seed with a stream name.
pub fn derive(root: u64, name: &str) -> u64 {
    // FNV-1a over the name, then a SplitMix64 finalizer over the combination
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(root ^ splitmix(h))
}

/// Like [`derive`] with an extra integer component (e.g. a seed index).
pub fn derive_indexed(root: u64, name: &str, index: u64) -> u64 {
    splitmix(derive(root, name) ^ splitmix(index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
