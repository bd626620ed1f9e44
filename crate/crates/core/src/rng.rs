//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit [`SimRng`]; parallel work
//! derives one independent stream per item from `(seed, index)`.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Mean at and above which Poisson draws switch to the rounded Gaussian
/// approximation `N(λ, λ)`.
pub const DEFAULT_POISSON_CROSSOVER: f64 = 30.0;

#[derive(Clone, Debug)]
pub struct SimRng {
    inner: ChaCha12Rng,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        SimRng {
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` of generator `seed`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SimRng { inner }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Poisson draw with the default crossover.
    pub fn poisson(&mut self, mean: f64) -> f64 {
        self.poisson_with_crossover(mean, DEFAULT_POISSON_CROSSOVER)
    }

    /// Knuth's multiplication method below `crossover`, rounded and clamped
    /// `N(λ, λ)` at or above it. `mean` must be finite and non-negative.
    pub fn poisson_with_crossover(&mut self, mean: f64, crossover: f64) -> f64 {
        if mean <= 0.0 {
            return 0.0;
        }
        if mean >= crossover {
            return (mean + mean.sqrt() * self.normal()).round().max(0.0);
        }
        let limit = (-mean).exp();
        let mut k = 0u64;
        let mut p = 1.0;
        loop {
            p *= self.uniform();
            if p <= limit {
                return k as f64;
            }
            k += 1;
        }
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| self.normal()).expect("shape from caller")
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| self.uniform_range(lo, hi)).expect("shape from caller")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seeds_give_identical_streams() {
        let mut a = SimRng::new(7);
        let mut b = SimRng::new(7);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn derived_streams_differ() {
        let mut a = SimRng::derive(7, 0);
        let mut b = SimRng::derive(7, 1);
        let va: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let vb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(va, vb);
    }

    #[test]
    fn knuth_branch_matches_poisson_moments() {
        let mut rng = SimRng::new(3);
        let n = 200_000;
        let lambda = 4.0;
        let xs: Vec<f64> = (0..n).map(|_| rng.poisson(lambda)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - lambda).abs() < 0.03, "mean {mean}");
        assert!((var - lambda).abs() < 0.08, "var {var}");
        assert!(xs.iter().all(|x| x.fract() == 0.0 && *x >= 0.0));
    }
}
