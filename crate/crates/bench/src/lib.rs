//! Shared fixtures for benchmarks.

use lata_core::harness::{generate_synthetic, SyntheticSpec};
use lata_core::model::zero_shot_matrix;
use lata_core::{Dataset, Embedding, Matrix};

/// A synthetic dataset whose pool plus test set holds `n` items.
pub fn dataset(n: usize, n_classes: usize, dim: usize, n_cal: usize) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        n_classes,
        dim,
        noise: 0.3,
        prototype_noise: 0.35,
        n_cal,
        n_test: n - n_cal,
        seed: 17,
        ..Default::default()
    })
    .expect("valid fixture spec")
}

/// Every embedding of `data`, calibration pool first.
pub fn pool(data: &Dataset) -> Vec<Embedding> {
    data.cal
        .iter()
        .map(|e| e.embedding.clone())
        .chain(data.test.iter().map(|e| e.embedding.clone()))
        .collect()
}

pub fn zero_shot(data: &Dataset, pool: &[Embedding]) -> Matrix {
    zero_shot_matrix(pool.iter(), &data.bank, 1.0).expect("fixture scores")
}
