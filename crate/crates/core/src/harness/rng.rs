//! Named random sub-streams derived from one top-level seed.
//!
//! `stream(seed, "init")` and `stream(seed, "data")` are independent, so
//! changing how one component consumes randomness never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    indexed(seed, name, 0)
}

/// A stream keyed by `(seed, name, index)`; used where draws must be a pure
/// function of e.g. a step or sample id.
pub fn indexed(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(index)));
    rng.set_stream(fnv1a(name));
    rng
}

/// A plain `u64` seed for a named component.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    splitmix(seed ^ fnv1a(name))
}
