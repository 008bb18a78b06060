//! Deterministic seed splitting.
//!
//! Every random stream in an experiment is derived from one root seed with
//!
//! ```text
//! child = splitmix64(splitmix64(root ^ fnv1a64(label)) ^ index)
//! ```
//!
//! where `fnv1a64` is the 64-bit FNV-1a hash of the UTF-8 role label
//! (`"truth"`, `"obs"`, `"init"`, `"shuffle"`, ...) and `index` is the
//! repetition or sweep-point number. The derivation does not depend on
//! scheduling order, so parallel repetitions reproduce sequential ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in label.bytes() {
        h ^= u64::from(byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Child seed for `(root, label, index)`.
pub fn child_seed(root: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a64(label)) ^ index)
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Seeded generator for a role/index pair.
pub fn child_rng(root: u64, label: &str, index: u64) -> Rng {
    rng_from(child_seed(root, label, index))
}
