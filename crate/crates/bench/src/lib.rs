//! Shared fixtures for the benchmarks.

use nsm_core::dgp::{self, DgpConfig};
use nsm_core::{Dataset, EmpiricalPair, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Two point clouds of `n` points each in `dim` dimensions.
pub fn pair(n: usize, dim: usize, seed: u64) -> EmpiricalPair {
    EmpiricalPair::new(uniform_matrix(n, dim, seed), uniform_matrix(n, dim, seed + 1))
        .expect("valid fixture")
}

pub fn synthetic(n: usize, d_observed: usize) -> Dataset {
    dgp::generate(&DgpConfig {
        n,
        d_observed,
        d_latent: 5.min(d_observed),
        ..DgpConfig::default()
    })
    .expect("valid fixture")
}
