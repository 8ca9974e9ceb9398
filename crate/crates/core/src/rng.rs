//! Counter-style random streams.
//!
//! Every random draw in the crate comes from a generator keyed by a tuple of
//! stable identifiers (master seed, dataset name, row index, ...). Results
//! therefore do not depend on iteration order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Builder for a keyed stream: fold any number of labels and integers into
/// the key, then call [`StreamKey::rng`].
#[derive(Debug, Clone, Copy)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey(splitmix64(seed))
    }

    pub fn with_str(self, label: &str) -> Self {
        StreamKey(splitmix64(self.0 ^ fnv1a(label.as_bytes())))
    }

    pub fn with_u64(self, v: u64) -> Self {
        StreamKey(splitmix64(self.0 ^ splitmix64(v.wrapping_add(0x5851_f42d_4c95_7f2d))))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> StreamRng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
