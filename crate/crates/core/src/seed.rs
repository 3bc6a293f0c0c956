//! Independent, reproducible random streams derived from one run seed.

/// Purpose tag mixed into derived seeds so that streams never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Glyphs = 1,
    Corruption = 2,
    Placement = 3,
    Augment = 4,
    Warmup = 5,
    Model = 6,
    Training = 7,
    Split = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for item `index` of `stream` under the run seed `seed`.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream as u64) ^ index)
}
