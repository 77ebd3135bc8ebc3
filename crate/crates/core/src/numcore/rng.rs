use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;

/// Deterministic, splittable random stream.
///
/// Backed by ChaCha12 keyed by `seed`; every stream id selects a disjoint
/// 2^64-block keystream, so streams derived with [`RngStream::split`] never
/// overlap. Draw sequences depend only on `(seed, stream, position)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha12Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngStream { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child stream `index`. The result depends only on this stream's
    /// identity, not on how many values have been drawn from it.
    pub fn split(&self, index: u64) -> RngStream {
        let child = splitmix64(self.stream ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)));
        RngStream::with_stream(self.seed, child)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.normal();
        }
    }

    /// Tensor of i.i.d. standard normal draws.
    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let mut data = vec![0.0; n];
        self.fill_normal(&mut data);
        Tensor::new(shape.to_vec(), data).expect("valid shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a = RngStream::new(11).gaussian(&[4, 5]);
        let b = RngStream::new(11).gaussian(&[4, 5]);
        assert_eq!(a, b);
    }

    #[test]
    fn split_streams_differ_and_reproduce() {
        let parent = RngStream::new(3);
        let mut a = parent.split(0);
        let mut b = parent.split(1);
        let xa: Vec<f64> = (0..16).map(|_| a.normal()).collect();
        let xb: Vec<f64> = (0..16).map(|_| b.normal()).collect();
        assert_ne!(xa, xb);
        let mut a2 = parent.split(0);
        let xa2: Vec<f64> = (0..16).map(|_| a2.normal()).collect();
        assert_eq!(xa, xa2);
    }

    #[test]
    fn split_ignores_parent_position() {
        let mut parent = RngStream::new(5);
        let before = parent.split(2).normal();
        parent.normal();
        assert_eq!(parent.split(2).normal(), before);
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = RngStream::new(2024);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let x = rng.normal();
            sum += x;
            sum2 += x * x;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!(mean.abs() <= 0.005, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.01, "var {var}");
    }
}
