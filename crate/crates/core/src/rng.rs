//! Counter-based random streams.
//!
//! Every random draw in training and sampling is keyed by `(seed, a, b, stream)`
//! so that batch elements can be processed in any order and still reproduce the
//! sequential result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

/// Stream ids used across the crate.
pub mod streams {
    pub const NOISE: u64 = 0;
    pub const DATA: u64 = 1;
    pub const SEGMENT: u64 = 2;
    pub const INTERMEDIATE: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const MIX_LENGTHS: u64 = 5;
    pub const CONDITION: u64 = 6;
    pub const INIT: u64 = 7;
    pub const PROJECTIONS: u64 = 8;
    pub const DATASET: u64 = 9;
}

pub fn keyed(seed: u64, a: u64, b: u64, stream: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&a.to_le_bytes());
    key[16..24].copy_from_slice(&b.to_le_bytes());
    key[24..].copy_from_slice(&0x5eed_f10f_u64.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Initial noise `x_1` for sample `index` of a run seeded with `seed`.
///
/// Teacher and student samplers share this so their outputs are seed-paired.
pub fn initial_noise(seed: u64, index: u64, dim: usize) -> Vec<f64> {
    let mut rng = keyed(seed, index, u64::MAX, streams::NOISE);
    normal_vec(&mut rng, dim)
}
