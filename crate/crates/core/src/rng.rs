//! Seeded random streams.
//!
//! Every stochastic routine takes a caller-owned [`Rng`]; sub-streams are split
//! off with [`fork`] so that adding draws in one component never shifts the
//! draws of another.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::DenseArray;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from `rng` tagged by `stream`.
pub fn fork(rng: &mut Rng, stream: u64) -> Rng {
    let base: u64 = rng.gen();
    ChaCha8Rng::seed_from_u64(base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_array(rng: &mut Rng, shape: &[usize]) -> DenseArray {
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal(rng)).collect();
    DenseArray::new(shape.to_vec(), data).expect("shape checked by caller")
}

pub fn uniform_index(rng: &mut Rng, n: usize) -> usize {
    rng.gen_range(0..n)
}

/// Uniform integer in `lo..=hi`.
pub fn uniform_inclusive(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}
