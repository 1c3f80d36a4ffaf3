//! Seeded random streams.
//!
//! Backed by ChaCha8 (`rand_chacha::ChaCha8Rng`), whose output is specified
//! bit-for-bit and therefore identical across platforms for a given seed.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{numel, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn from_key(key: [u8; 32]) -> Self {
        Self {
            seed: u64::from_le_bytes(key[..8].try_into().unwrap()),
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this generator's seed and a label.
    pub fn fork(&self, stream: u64) -> Rng {
        let mixed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
        Rng::new(mixed)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Normal sample with standard deviation `std`, resampled until it lies
    /// within two standard deviations.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        items.shuffle(&mut self.inner);
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let data = (0..numel(shape)).map(|_| T::lit(self.uniform(lo, hi))).collect();
        Tensor::new(shape, data).expect("valid shape")
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let data = (0..numel(shape)).map(|_| T::lit(self.normal() * std)).collect();
        Tensor::new(shape, data).expect("valid shape")
    }

    pub fn trunc_normal_tensor<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let data = (0..numel(shape)).map(|_| T::lit(self.trunc_normal(std))).collect();
        Tensor::new(shape, data).expect("valid shape")
    }
}
