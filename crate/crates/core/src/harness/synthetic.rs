//! Gaussian-cluster datasets with exchangeable calibration and test pools.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LataError, Result};
use crate::io::Dataset;
use crate::model::{Embedding, LabeledExample, PrototypeBank, TestExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    /// Norm of each class mean before noise is added.
    pub separation: f64,
    /// Per-coordinate standard deviation of the sample noise.
    pub noise: f64,
    /// Per-coordinate standard deviation added to the means to form the
    /// prototypes; 0 makes prototypes equal to the class means.
    #[serde(default)]
    pub prototype_noise: f64,
    /// Class mixture weights; uniform when absent.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    /// Size of the labeled pool calibration sets are drawn from.
    pub n_cal: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 5,
            dim: 32,
            separation: 1.0,
            noise: 0.3,
            prototype_noise: 0.0,
            weights: None,
            n_cal: 200,
            n_test: 920,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LataError::Config(m));
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.dim < self.n_classes {
            return bad(format!(
                "orthogonal class means need dim >= classes ({} < {})",
                self.dim, self.n_classes
            ));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return bad(format!("separation must be positive, got {}", self.separation));
        }
        for (name, v) in [("noise", self.noise), ("prototype noise", self.prototype_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.n_cal == 0 || self.n_test == 0 {
            return bad("calibration pool and test sizes must be positive".into());
        }
        if let Some(w) = &self.weights {
            let s: f64 = w.iter().sum();
            if w.len() != self.n_classes || w.iter().any(|x| x.is_nan() || *x < 0.0) || (s - 1.0).abs() > 1e-6 {
                return bad("mixture weights must be a probability vector over the classes".into());
            }
        }
        Ok(())
    }

    pub fn marginals(&self) -> Vec<f64> {
        self.weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.n_classes as f64; self.n_classes])
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Gram-Schmidt on Gaussian draws; twice for numerical safety.
fn orthonormal_rows(rng: &mut ChaCha8Rng, c: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c);
    while rows.len() < c {
        let mut v = gaussian(rng, d, 1.0);
        for _ in 0..2 {
            for r in &rows {
                let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows
}

/// Draws a dataset; pool and test items come from one shuffled sample, so
/// they are exchangeable.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, d) = (spec.n_classes, spec.dim);
    let means = orthonormal_rows(&mut rng, c, d);
    let protos = means
        .iter()
        .map(|m| {
            let noisy: Vec<f64> = m
                .iter()
                .zip(gaussian(&mut rng, d, spec.prototype_noise))
                .map(|(a, e)| a + e)
                .collect();
            Embedding::normalize(&noisy)
        })
        .collect::<Result<Vec<_>>>()?;
    let bank = PrototypeBank::unnamed(protos)?;

    let picker = WeightedIndex::new(spec.marginals())
        .map_err(|e| LataError::Config(format!("mixture weights: {e}")))?;
    let total = spec.n_cal + spec.n_test;
    let mut items = Vec::with_capacity(total);
    for _ in 0..total {
        let y = picker.sample(&mut rng);
        let mut x: Vec<f64> = means[y].iter().map(|m| spec.separation * m).collect();
        for (xi, e) in x.iter_mut().zip(gaussian(&mut rng, d, spec.noise)) {
            *xi += e;
        }
        items.push(LabeledExample {
            embedding: Embedding::normalize(&x)?,
            label: y,
        });
    }
    items.shuffle(&mut rng);
    let test = items.split_off(spec.n_cal).into_iter().map(TestExample::from).collect();
    Ok(Dataset {
        cal: items,
        test,
        bank,
    })
}
