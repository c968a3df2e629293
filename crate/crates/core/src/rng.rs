//! Named, indexed random substreams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream names used across the crate. Keeping them in one place makes it
/// obvious that two components never share a stream by accident.
pub mod stream {
    pub const SUBSPACES: &str = "subspaces";
    pub const SIGNATURES: &str = "signatures";
    pub const SAMPLES_TRAIN: &str = "samples/train";
    pub const SAMPLES_TEST: &str = "samples/test";
    pub const IMAGE: &str = "image";
    pub const INIT: &str = "init";
    pub const SHUFFLE: &str = "shuffle";
    pub const DONOR: &str = "donor";
    pub const NOISE: &str = "noise";
    pub const SUBSAMPLE: &str = "subsample";
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// FNV-1a, stable across platforms and releases (unlike std's hasher).
fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Returns an RNG for substream `(seed, name, index)`.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut s = splitmix64(seed ^ name_hash(name));
    for chunk in key.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
