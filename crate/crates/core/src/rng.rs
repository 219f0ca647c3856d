//! Counter-based seed derivation.
//!
//! Every random quantity is addressed by `(master seed, role, index)`; the
//! derived 64-bit key seeds a ChaCha8 generator whose stream id is the index, so
//! any vector can be regenerated in isolation and parallel schedules cannot
//! change the draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const ROLE_INPUT: u64 = 1;
pub const ROLE_OUTPUT: u64 = 2;
pub const ROLE_DP_BASE: u64 = 3;
pub const ROLE_INIT: u64 = 4;
pub const ROLE_MC: u64 = 5;

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix two words into a new key.
#[inline]
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b.rotate_left(32) ^ 0xD1B5_4A32_D192_ED03)
}

/// Key for a role under a master seed.
#[inline]
pub fn derive(master: u64, role: u64) -> u64 {
    mix(master, role)
}

/// Generator for stream `index` under `key`.
pub fn stream(key: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Fill `out` with standard normals drawn from stream `index` under `key`.
pub fn fill_normal(key: u64, index: u64, out: &mut [f64]) {
    let mut rng = stream(key, index);
    for x in out.iter_mut() {
        *x = StandardNormal.sample(&mut rng);
    }
}
