//! Seeded standard-normal generator.
//!
//! Uniforms come from ChaCha8 (platform independent); normals use the
//! basic Box–Muller transform, so a seed pins every draw.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        NormalStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent substream `index` of `seed`.
    pub fn substream(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        NormalStream { rng, spare: None }
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn next_uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.next_uniform();
        let u2 = self.next_uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (TAU * u2).sin_cos();
        self.spare = Some(radius * s);
        radius * c
    }

    pub fn vector(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.next_normal())
    }

    /// Column-major fill.
    pub fn matrix(&mut self, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| self.next_normal())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a: Vec<u64> = {
            let mut s = NormalStream::new(42);
            (0..100).map(|_| s.next_normal().to_bits()).collect()
        };
        let b: Vec<u64> = {
            let mut s = NormalStream::new(42);
            (0..100).map(|_| s.next_normal().to_bits()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn substreams_differ() {
        let mut a = NormalStream::substream(1, 0);
        let mut b = NormalStream::substream(1, 1);
        assert_ne!(a.next_normal(), b.next_normal());
    }

    #[test]
    fn moments_are_standard() {
        let mut s = NormalStream::new(7);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| s.next_normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 5.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt());
    }
}
