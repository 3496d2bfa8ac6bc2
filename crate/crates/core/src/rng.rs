//! Deterministic Gaussian source.
//!
//! ChaCha8 keyed by the 64-bit seed, with the 64-bit stream id selecting an
//! independent keystream. Normals come from `rand_distr::StandardNormal`
//! (ziggurat) drawn in `f64` and rounded to `f32`. Golden traces depend on
//! this exact combination.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{LatentTensor, Shape};

/// Stream ids used by the pipeline. Anything else is free for callers.
pub mod streams {
    pub const INIT_NOISE: u64 = 1;
    pub const SOURCE_NOISE: u64 = 2;
    pub const TRAINING: u64 = 3;
    pub const PARAMS: u64 = 4;
}

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

/// I.i.d. standard normal tensor.
pub fn sample_gaussian(shape: Shape, rng: &mut SeededRng) -> LatentTensor {
    let data: Vec<f32> = (0..shape.numel()).map(|_| rng.normal() as f32).collect();
    LatentTensor::from_vec(shape, data).expect("gaussian samples are finite")
}
