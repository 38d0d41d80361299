//! Seeded random streams.
//!
//! Every source of randomness is derived from one run seed plus a purpose
//! tag, so that e.g. the masking stream of a run is unaffected by how many
//! draws the data-order stream has made. ChaCha stream ids carry the tag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags for independent substreams of one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Data = 2,
    Masking = 3,
    Probe = 4,
    Dropout = 5,
    Cohort = 6,
    Split = 7,
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes; stable across platforms and releases.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// Substream keyed by both purpose and an item key (participant id hash,
/// probe seed, ...).
pub fn keyed_stream(seed: u64, purpose: Purpose, key: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(key)));
    rng.set_stream(purpose as u64);
    rng
}
