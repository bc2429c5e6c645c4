//! Named, independent RNG streams derived from one master seed.
//!
//! A stream seed is `splitmix64(master ^ fnv1a64(name))`. Arms that share a
//! master seed therefore share the dataset and the initial parameters while
//! shuffling and buffer sampling stay independent of each other.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub const DATAGEN: &str = "datagen";
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const BUFFER: &str = "buffer";

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream_seed(master: u64, name: &str) -> u64 {
    splitmix64(master ^ fnv1a64(name.as_bytes()))
}

pub fn stream(master: u64, name: &str) -> Rng {
    Rng::seed_from_u64(stream_seed(master, name))
}

/// Seed for item `index` within a stream, for per-item generation.
pub fn item_seed(stream_seed: u64, index: u64) -> u64 {
    splitmix64(stream_seed ^ splitmix64(index.wrapping_add(1)))
}
