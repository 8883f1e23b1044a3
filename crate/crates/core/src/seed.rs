//! Named random substreams derived from a single root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type used everywhere a seeded stream is needed.
pub type SeededRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream for `name` from a root seed.
///
/// The derivation is a fixed FNV-1a hash of the name mixed with the seed, so
/// it is stable across platforms and releases.
pub fn substream(root: u64, name: &str) -> SeededRng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    SeededRng::seed_from_u64(splitmix(root ^ splitmix(h)))
}

pub fn from_seed(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}
