//! Seeded randomness.
//!
//! Everything random in a run (weight init, child sampling, acceptance draws,
//! bonus draws) comes from one xoshiro256** stream seeded through SplitMix64.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;

/// A source of uniform draws in `[0, 1)`.
pub trait UniformSource {
    fn next_uniform(&mut self) -> f64;
}

#[derive(Debug, Clone)]
pub struct SeededRng(Xoshiro256StarStar);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256StarStar::seed_from_u64(seed))
    }

    /// Normal sample with the given standard deviation.
    pub fn normal(&mut self, std: f32) -> f32 {
        let z: f64 = StandardNormal.sample(&mut self.0);
        (z * std as f64) as f32
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.gen()
    }
}

impl UniformSource for SeededRng {
    fn next_uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }
}

/// Replays a fixed list of uniforms; panics when exhausted. Used to drive
/// verification through every branch deterministically.
#[derive(Debug, Clone)]
pub struct ScriptedUniforms {
    values: Vec<f64>,
    cursor: usize,
}

impl ScriptedUniforms {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, cursor: 0 }
    }

    pub fn consumed(&self) -> usize {
        self.cursor
    }
}

impl UniformSource for ScriptedUniforms {
    fn next_uniform(&mut self) -> f64 {
        let u = *self
            .values
            .get(self.cursor)
            .unwrap_or_else(|| panic!("scripted uniforms exhausted after {}", self.cursor));
        self.cursor += 1;
        u
    }
}
