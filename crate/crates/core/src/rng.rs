//! Deterministic random streams keyed by `(seed, tag, a, b)`, so that draws
//! for a window do not depend on the order in which windows are visited.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream tags.
pub const TAG_INIT: u64 = 1;
pub const TAG_TRAIN_EPS: u64 = 2;
pub const TAG_BATCH: u64 = 3;
pub const TAG_EVAL_EPS: u64 = 4;
pub const TAG_PRIOR: u64 = 5;
pub const TAG_SYNTH: u64 = 6;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(splitmix(seed) ^ tag) ^ a) ^ b);
    ChaCha8Rng::seed_from_u64(key)
}

pub fn standard_normals<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Standard normal draws for one `(seed, tag, a, b)` stream.
pub fn normals(seed: u64, tag: u64, a: u64, b: u64, len: usize) -> Vec<f64> {
    standard_normals(&mut stream(seed, tag, a, b), len)
}
