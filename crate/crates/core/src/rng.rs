//! Seeded randomness. Every stochastic component derives its own stream
//! from the run seed and a purpose tag, so adding a consumer never shifts
//! the draws of another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::tensor::{Real, Tensor};

/// FNV-1a over the tag, mixed with the base seed.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ base.rotate_left(17);
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn stream(base: u64, tag: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(base, tag))
}

/// Truncated-normal-free init: plain scaled Gaussian, the usual choice for
/// small transformer stacks.
pub fn normal_tensor<T: Real>(rng: &mut ChaCha12Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(gaussian(rng) * std)).collect();
    Tensor::new(shape, data)
}

pub fn uniform_tensor<T: Real>(rng: &mut ChaCha12Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect();
    Tensor::new(shape, data)
}

/// Box-Muller on explicit uniforms keeps draws identical across `f32`/`f64`
/// instantiations of the callers.
pub fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
