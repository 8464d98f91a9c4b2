//! Embeddings, prototype banks, probability vectors and zero-shot scoring.
//!
//! Everything here is immutable after construction. Probabilities are kept
//! in `f64` even when they originate from `f32` files.

use serde::Serialize;

use crate::error::{LataError, Result};
use crate::matrix::{dot, Matrix};

const UNIT_NORM_TOL: f64 = 1e-6;
const SIMPLEX_TOL: f64 = 1e-6;

/// Unit-norm feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Unchecked constructor for tests that need raw points.
    #[cfg(test)]
    pub(crate) fn raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    /// L2-normalizes `raw`. Zero vectors and non-finite entries are rejected.
    pub fn normalize(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() {
            return Err(LataError::InvalidInput("empty feature vector".into()));
        }
        if let Some(pos) = raw.iter().position(|x| !x.is_finite()) {
            return Err(LataError::InvalidInput(format!(
                "non-finite entry at position {pos}"
            )));
        }
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(LataError::InvalidInput("zero feature vector".into()));
        }
        Ok(Self(raw.iter().map(|x| x / norm).collect()))
    }

    /// Wraps a vector that is already unit norm (checked within 1e-6).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if values.is_empty() || !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(LataError::InvalidInput(format!(
                "embedding is not unit norm (norm = {norm})"
            )));
        }
        Ok(Self(values))
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }
}

/// Free-function form of [`Embedding::normalize`].
pub fn normalize(v: &[f64]) -> Result<Embedding> {
    Embedding::normalize(v)
}

/// Arithmetic mean of unit-norm template embeddings.
///
/// The mean is returned as-is; [`PrototypeBank::from_templates`] re-normalizes
/// it before use.
pub fn average_prototype(templates: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = templates
        .first()
        .ok_or_else(|| LataError::InvalidInput("no templates to average".into()))?;
    let dim = first.len();
    let mut mean = vec![0.0; dim];
    for t in templates {
        if t.len() != dim {
            return Err(LataError::dims("template dimension", dim, t.len()));
        }
        for (m, x) in mean.iter_mut().zip(t) {
            *m += x;
        }
    }
    let n = templates.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// `C` unit-norm class prototypes with their names.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    prototypes: Vec<Embedding>,
    class_names: Vec<String>,
}

impl PrototypeBank {
    pub fn new(prototypes: Vec<Embedding>, class_names: Vec<String>) -> Result<Self> {
        if prototypes.len() < 2 {
            return Err(LataError::InvalidInput(format!(
                "need at least 2 classes, got {}",
                prototypes.len()
            )));
        }
        if class_names.len() != prototypes.len() {
            return Err(LataError::dims(
                "class names",
                prototypes.len(),
                class_names.len(),
            ));
        }
        let dim = prototypes[0].dim();
        for p in &prototypes {
            if p.dim() != dim {
                return Err(LataError::dims("prototype dimension", dim, p.dim()));
            }
        }
        Ok(Self {
            prototypes,
            class_names,
        })
    }

    /// Normalizes each row of `raw` (C x D) into a prototype.
    pub fn from_matrix(raw: &Matrix, class_names: Vec<String>) -> Result<Self> {
        let prototypes = raw
            .iter_rows()
            .map(Embedding::normalize)
            .collect::<Result<Vec<_>>>()?;
        Self::new(prototypes, class_names)
    }

    /// Averages each class's templates and re-normalizes the mean.
    pub fn from_templates(templates: &[Vec<Vec<f64>>], class_names: Vec<String>) -> Result<Self> {
        let prototypes = templates
            .iter()
            .map(|t| average_prototype(t).and_then(|m| Embedding::normalize(&m)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(prototypes, class_names)
    }

    /// Prototypes named `class0..class{C-1}`.
    pub fn unnamed(prototypes: Vec<Embedding>) -> Result<Self> {
        let names = (0..prototypes.len()).map(|c| format!("class{c}")).collect();
        Self::new(prototypes, names)
    }

    #[inline]
    pub fn n_classes(&self) -> usize {
        self.prototypes.len()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.prototypes[0].dim()
    }

    #[inline]
    pub fn prototype(&self, c: usize) -> &Embedding {
        &self.prototypes[c]
    }

    pub fn prototypes(&self) -> &[Embedding] {
        &self.prototypes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Prototypes stacked as a C x D matrix.
    pub fn to_matrix(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.prototypes.iter().map(|p| p.as_slice()).collect();
        Matrix::from_rows(&rows).expect("prototypes share a dimension")
    }
}

/// Point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Validates entries in [0, 1] summing to 1 within 1e-6.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(LataError::InvalidInput("empty probability vector".into()));
        }
        if probs
            .iter()
            .any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0 + SIMPLEX_TOL)
        {
            return Err(LataError::InvalidInput(format!(
                "probability entries out of [0, 1]: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(LataError::InvalidInput(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n_classes: usize) -> Self {
        Self(vec![1.0 / n_classes as f64; n_classes])
    }

    pub fn one_hot(n_classes: usize, index: usize) -> Self {
        let mut v = vec![0.0; n_classes];
        v[index] = 1.0;
        Self(v)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, c: usize) -> f64 {
        self.0[c]
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// An embedding with its calibration label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub embedding: Embedding,
    pub label: usize,
}

/// A test item; the label is only present for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TestExample {
    pub embedding: Embedding,
    pub label: Option<usize>,
}

impl From<LabeledExample> for TestExample {
    fn from(ex: LabeledExample) -> Self {
        TestExample {
            embedding: ex.embedding,
            label: Some(ex.label),
        }
    }
}

/// Numerically stable softmax of `logits / tau`, written into `out`.
pub(crate) fn softmax_into(logits: &[f64], tau: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - max) / tau).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LataError::InvalidInput(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// Temperature-scaled softmax over prototype similarities.
pub fn zero_shot_probs(v: &Embedding, bank: &PrototypeBank, tau: f64) -> Result<ProbabilityVector> {
    check_tau(tau)?;
    if v.dim() != bank.dim() {
        return Err(LataError::dims("embedding vs prototypes", bank.dim(), v.dim()));
    }
    let logits: Vec<f64> = bank.prototypes().iter().map(|p| v.dot(p)).collect();
    let mut probs = vec![0.0; logits.len()];
    softmax_into(&logits, tau, &mut probs);
    Ok(ProbabilityVector(probs))
}

/// Zero-shot probabilities for a whole pool, one row per embedding.
pub fn zero_shot_matrix<'a, I>(embeddings: I, bank: &PrototypeBank, tau: f64) -> Result<Matrix>
where
    I: IntoIterator<Item = &'a Embedding>,
{
    check_tau(tau)?;
    let c = bank.n_classes();
    let mut data = Vec::new();
    let mut logits = vec![0.0; c];
    let mut probs = vec![0.0; c];
    let mut rows = 0;
    for v in embeddings {
        if v.dim() != bank.dim() {
            return Err(LataError::dims("embedding vs prototypes", bank.dim(), v.dim()));
        }
        for (l, p) in logits.iter_mut().zip(bank.prototypes()) {
            *l = v.dot(p);
        }
        softmax_into(&logits, tau, &mut probs);
        data.extend_from_slice(&probs);
        rows += 1;
    }
    Matrix::new(rows, c, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding::normalize(v).unwrap()
    }

    fn bank(rows: &[&[f64]]) -> PrototypeBank {
        PrototypeBank::unnamed(rows.iter().map(|r| e(r)).collect()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(e(&[3.0, 4.0]).as_slice(), &[0.6, 0.8]);
        assert_eq!(e(&[1.0, 0.0, 0.0]).as_slice(), &[1.0, 0.0, 0.0]);
        assert!(Embedding::normalize(&[0.0, 0.0]).is_err());
        assert!(Embedding::normalize(&[f64::NAN, 1.0]).is_err());
        assert!(Embedding::normalize(&[]).is_err());
    }

    #[test]
    fn average_prototype_examples() {
        let same = average_prototype(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(same, vec![1.0, 0.0]);

        let mean = average_prototype(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(mean, vec![0.5, 0.5]);
        let renorm = e(&mean);
        let expected = 0.5 / (0.5f64 * 0.5 + 0.5 * 0.5).sqrt();
        for x in renorm.as_slice() {
            assert!((x - expected).abs() < 1e-12);
        }
        assert!((expected - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);

        assert!(average_prototype(&[]).is_err());
        assert!(average_prototype(&[vec![1.0], vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn bank_requires_two_classes() {
        assert!(PrototypeBank::unnamed(vec![e(&[1.0, 0.0])]).is_err());
    }

    #[test]
    fn zero_shot_examples() {
        let b = bank(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let orth = zero_shot_probs(&e(&[0.0, 0.0, 1.0]), &b, 1.0).unwrap();
        assert_eq!(orth.as_slice(), &[0.5, 0.5]);

        let b2 = bank(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let p = zero_shot_probs(&e(&[1.0, 0.0]), &b2, 1.0).unwrap();
        // softmax(1, 0) = 1 / (1 + e^-1)
        let oracle = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p.get(0) - oracle).abs() < 1e-9);
        assert!((p.get(1) - (1.0 - oracle)).abs() < 1e-9);

        let hot = zero_shot_probs(&e(&[1.0, 0.0]), &b2, 1e6).unwrap();
        assert!(hot.as_slice().iter().all(|x| (x - 0.5).abs() < 1e-4));
    }

    #[test]
    fn zero_shot_errors() {
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(zero_shot_probs(&e(&[1.0, 0.0]), &b, 0.0).is_err());
        assert!(zero_shot_probs(&e(&[1.0, 0.0]), &b, -1.0).is_err());
        assert!(zero_shot_probs(&e(&[1.0, 0.0, 0.0]), &b, 1.0).is_err());
    }

    #[test]
    fn probability_vector_validation() {
        assert!(ProbabilityVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbabilityVector::new(vec![0.6, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![-0.1, 1.1]).is_err());
        assert_eq!(ProbabilityVector::new(vec![0.5, 0.5]).unwrap().argmax(), 0);
    }

    fn unit_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, dim)
            .prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
    }

    proptest! {
        #[test]
        fn zero_shot_is_simplex_and_argmax_tau_invariant(
            v in unit_vec(4),
            protos in prop::collection::vec(unit_vec(4), 2..6),
            tau in 0.01f64..50.0,
        ) {
            let b = PrototypeBank::unnamed(protos.iter().map(|p| e(p)).collect()).unwrap();
            let v = e(&v);
            let p = zero_shot_probs(&v, &b, tau).unwrap();
            let sum: f64 = p.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(p.as_slice().iter().all(|x| (0.0..=1.0).contains(x)));
            prop_assert!(ProbabilityVector::new(p.clone().into_vec()).is_ok());
            let base = zero_shot_probs(&v, &b, 1.0).unwrap();
            // Exact similarity ties are measure-zero under this strategy.
            prop_assert_eq!(p.argmax(), base.argmax());
        }

        #[test]
        fn max_subtraction_matches_naive_softmax(logits in prop::collection::vec(-5.0f64..5.0, 2..8)) {
            let mut stable = vec![0.0; logits.len()];
            softmax_into(&logits, 1.0, &mut stable);
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (s, l) in stable.iter().zip(&logits) {
                prop_assert!((s - l.exp() / z).abs() < 1e-9);
            }
        }
    }
}
