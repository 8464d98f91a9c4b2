//! Per-sample failure probability `u` and label attention `alpha`.

use serde::{Deserialize, Serialize};

use crate::error::{LataError, Result};
use crate::matrix::{dot, Matrix};
use crate::model::{argmax, softmax_into, Embedding, ProbabilityVector, PrototypeBank};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureSignals {
    pub u: f64,
    pub attention: ProbabilityVector,
}

impl FailureSignals {
    pub fn new(u: f64, attention: ProbabilityVector) -> Result<Self> {
        if !(0.0..=1.0).contains(&u) {
            return Err(LataError::InvalidInput(format!("failure probability {u} outside [0, 1]")));
        }
        Ok(Self { u, attention })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    #[default]
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

/// `y = act(W x + b)` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weight.mul_vec(x)?;
        for (yi, bi) in y.iter_mut().zip(&self.bias) {
            *yi = self.activation.apply(*yi + bi);
        }
        Ok(y)
    }
}

/// Single-head cross-attention from the image embedding to the class
/// prototypes, followed by an MLP on `[v, t_argmax, attended summary]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViluWeights {
    pub query_proj: Matrix,
    pub key_proj: Matrix,
    pub value_proj: Matrix,
    pub mlp: Vec<DenseLayer>,
    pub attention_scale: f64,
}

impl ViluWeights {
    pub fn new(
        query_proj: Matrix,
        key_proj: Matrix,
        value_proj: Matrix,
        mlp: Vec<DenseLayer>,
        attention_scale: Option<f64>,
    ) -> Result<Self> {
        let d = query_proj.rows();
        let scale = attention_scale.unwrap_or((d as f64).sqrt());
        let w = Self {
            query_proj,
            key_proj,
            value_proj,
            mlp,
            attention_scale: scale,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn dim(&self) -> usize {
        self.query_proj.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (name, p) in [
            ("query projection", &self.query_proj),
            ("key projection", &self.key_proj),
            ("value projection", &self.value_proj),
        ] {
            if p.rows() != d || p.cols() != d {
                return Err(LataError::InvalidInput(format!(
                    "{name} is {}x{}, expected {d}x{d}",
                    p.rows(),
                    p.cols()
                )));
            }
        }
        if !(self.attention_scale > 0.0 && self.attention_scale.is_finite()) {
            return Err(LataError::InvalidInput(format!(
                "attention scale must be positive, got {}",
                self.attention_scale
            )));
        }
        if self.mlp.is_empty() {
            return Err(LataError::InvalidInput("MLP has no layers".into()));
        }
        let mut width = 3 * d;
        for (l, layer) in self.mlp.iter().enumerate() {
            if layer.weight.cols() != width {
                return Err(LataError::InvalidInput(format!(
                    "MLP layer {l} expects input {}, previous width is {width}",
                    layer.weight.cols()
                )));
            }
            if layer.bias.len() != layer.weight.rows() {
                return Err(LataError::InvalidInput(format!(
                    "MLP layer {l} bias has {} entries for {} outputs",
                    layer.bias.len(),
                    layer.weight.rows()
                )));
            }
            width = layer.weight.rows();
        }
        if width != 1 {
            return Err(LataError::InvalidInput(format!(
                "MLP must end in one output, got {width}"
            )));
        }
        Ok(())
    }
}

fn check_dims(v: &Embedding, bank: &PrototypeBank, weights: &ViluWeights) -> Result<()> {
    if v.dim() != weights.dim() {
        return Err(LataError::dims("embedding vs attention weights", weights.dim(), v.dim()));
    }
    if bank.dim() != weights.dim() {
        return Err(LataError::dims("prototypes vs attention weights", weights.dim(), bank.dim()));
    }
    Ok(())
}

/// Returns the attention over classes and the attended value summary.
pub fn attention_forward(
    v: &Embedding,
    bank: &PrototypeBank,
    weights: &ViluWeights,
) -> Result<(ProbabilityVector, Vec<f64>)> {
    check_dims(v, bank, weights)?;
    let query = weights.query_proj.mul_vec(v.as_slice())?;
    let mut logits = Vec::with_capacity(bank.n_classes());
    let mut values = Vec::with_capacity(bank.n_classes());
    for t in bank.prototypes() {
        let key = weights.key_proj.mul_vec(t.as_slice())?;
        logits.push(dot(&query, &key));
        values.push(weights.value_proj.mul_vec(t.as_slice())?);
    }
    let mut attention = vec![0.0; logits.len()];
    softmax_into(&logits, weights.attention_scale, &mut attention);
    let mut summary = vec![0.0; weights.dim()];
    for (a, val) in attention.iter().zip(&values) {
        for (s, x) in summary.iter_mut().zip(val) {
            *s += a * x;
        }
    }
    Ok((ProbabilityVector::new(attention)?, summary))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mlp_u(v: &Embedding, bank: &PrototypeBank, q: &ProbabilityVector, summary: &[f64], weights: &ViluWeights) -> Result<f64> {
    let top = bank.prototype(q.argmax());
    let mut x = Vec::with_capacity(3 * weights.dim());
    x.extend_from_slice(v.as_slice());
    x.extend_from_slice(top.as_slice());
    x.extend_from_slice(summary);
    for layer in &weights.mlp {
        x = layer.forward(&x)?;
    }
    let u = sigmoid(x[0]);
    if u.is_nan() {
        return Err(LataError::Numerical {
            iteration: 0,
            detail: "failure MLP produced NaN".into(),
        });
    }
    Ok(u)
}

/// `sigmoid(g([v, t_argmax(q), summary]))`.
pub fn vilu_u(
    v: &Embedding,
    bank: &PrototypeBank,
    q: &ProbabilityVector,
    weights: &ViluWeights,
) -> Result<f64> {
    if q.len() != bank.n_classes() {
        return Err(LataError::dims("probability classes", bank.n_classes(), q.len()));
    }
    let (_, summary) = attention_forward(v, bank, weights)?;
    mlp_u(v, bank, q, &summary, weights)
}

/// Normalized entropy as `u`, `q` itself as attention.
pub fn heuristic_signals(q: &ProbabilityVector) -> FailureSignals {
    let h: f64 = q
        .as_slice()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    let u = (h / (q.len() as f64).ln()).clamp(0.0, 1.0);
    FailureSignals {
        u,
        attention: q.clone(),
    }
}

/// Perfect failure detector for synthetic experiments.
pub fn oracle_signals(q: &ProbabilityVector, true_label: usize) -> Result<FailureSignals> {
    if true_label >= q.len() {
        return Err(LataError::InvalidInput(format!(
            "label {true_label} out of range for {} classes",
            q.len()
        )));
    }
    let u = if argmax(q.as_slice()) == true_label { 0.0 } else { 1.0 };
    Ok(FailureSignals {
        u,
        attention: ProbabilityVector::one_hot(q.len(), true_label),
    })
}

/// Source of failure signals shared by calibration and test items.
pub trait FailureProvider: Send + Sync {
    fn signals(&self, v: &Embedding, q: &ProbabilityVector, bank: &PrototypeBank) -> Result<FailureSignals>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicProvider;

impl FailureProvider for HeuristicProvider {
    fn signals(&self, _v: &Embedding, q: &ProbabilityVector, _bank: &PrototypeBank) -> Result<FailureSignals> {
        Ok(heuristic_signals(q))
    }
}

#[derive(Debug, Clone)]
pub struct ViluProvider {
    weights: ViluWeights,
}

impl ViluProvider {
    pub fn new(weights: ViluWeights) -> Result<Self> {
        weights.validate()?;
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &ViluWeights {
        &self.weights
    }
}

impl FailureProvider for ViluProvider {
    fn signals(&self, v: &Embedding, q: &ProbabilityVector, bank: &PrototypeBank) -> Result<FailureSignals> {
        if q.len() != bank.n_classes() {
            return Err(LataError::dims("probability classes", bank.n_classes(), q.len()));
        }
        let (attention, summary) = attention_forward(v, bank, &self.weights)?;
        let u = mlp_u(v, bank, q, &summary, &self.weights)?;
        FailureSignals::new(u, attention)
    }
}

/// Applies one provider to every row of a pool.
pub fn pool_signals(
    provider: &dyn FailureProvider,
    embeddings: &[Embedding],
    q: &Matrix,
    bank: &PrototypeBank,
) -> Result<Vec<FailureSignals>> {
    if embeddings.len() != q.rows() {
        return Err(LataError::dims("pool rows", q.rows(), embeddings.len()));
    }
    embeddings
        .iter()
        .zip(q.iter_rows())
        .map(|(v, row)| provider.signals(v, &ProbabilityVector::new(row.to_vec())?, bank))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity(d: usize) -> Matrix {
        let mut m = Matrix::zeros(d, d);
        for i in 0..d {
            m.set(i, i, 1.0);
        }
        m
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
        let raw: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Embedding::normalize(&raw).unwrap()
    }

    fn zero_head(d: usize, bias: f64) -> Vec<DenseLayer> {
        vec![DenseLayer {
            weight: Matrix::zeros(1, 3 * d),
            bias: vec![bias],
            activation: Activation::Identity,
        }]
    }

    fn orthonormal_bank(d: usize, c: usize) -> PrototypeBank {
        let protos = (0..c)
            .map(|k| {
                let mut e = vec![0.0; d];
                e[k] = 1.0;
                Embedding::from_unit(e).unwrap()
            })
            .collect();
        PrototypeBank::unnamed(protos).unwrap()
    }

    #[test]
    fn attention_peaks_at_matching_prototype() {
        let bank = orthonormal_bank(4, 3);
        let w = ViluWeights::new(identity(4), identity(4), identity(4), zero_head(4, 0.0), Some(1.0)).unwrap();
        let (att, summary) = attention_forward(bank.prototype(0), &bank, &w).unwrap();
        assert_eq!(att.argmax(), 0);
        assert!(att.get(0) > att.get(1));
        assert_eq!(summary.len(), 4);
    }

    #[test]
    fn equal_keys_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_unit(&mut rng, 5);
        let bank = PrototypeBank::unnamed(vec![t.clone(), t.clone(), t.clone()]).unwrap();
        let value = random_matrix(&mut rng, 5, 5);
        let w = ViluWeights::new(
            random_matrix(&mut rng, 5, 5),
            random_matrix(&mut rng, 5, 5),
            value.clone(),
            zero_head(5, 0.0),
            None,
        )
        .unwrap();
        let v = random_unit(&mut rng, 5);
        let (att, summary) = attention_forward(&v, &bank, &w).unwrap();
        for k in 0..3 {
            assert!((att.get(k) - 1.0 / 3.0).abs() < 1e-12);
        }
        let vt = value.mul_vec(t.as_slice()).unwrap();
        for (a, b) in summary.iter().zip(&vt) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let bank = PrototypeBank::unnamed((0..3).map(|_| random_unit(&mut rng, d)).collect()).unwrap();
        let (q, k, val) = (
            random_matrix(&mut rng, d, d),
            random_matrix(&mut rng, d, d),
            random_matrix(&mut rng, d, d),
        );
        let w = ViluWeights::new(q.clone(), k.clone(), val.clone(), zero_head(d, 0.0), None).unwrap();
        let v = random_unit(&mut rng, d);
        let (att, summary) = attention_forward(&v, &bank, &w).unwrap();

        // Oracle: explicit index loops, naive softmax.
        let mut qv = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                qv[i] += q.get(i, j) * v.as_slice()[j];
            }
        }
        let mut scores = vec![0.0; 3];
        for (c, t) in bank.prototypes().iter().enumerate() {
            for i in 0..d {
                let mut kt = 0.0;
                for j in 0..d {
                    kt += k.get(i, j) * t.as_slice()[j];
                }
                scores[c] += qv[i] * kt;
            }
            scores[c] /= (d as f64).sqrt();
        }
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let expected: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
        let mut expected_summary = vec![0.0; d];
        for (c, t) in bank.prototypes().iter().enumerate() {
            for i in 0..d {
                for j in 0..d {
                    expected_summary[i] += expected[c] * val.get(i, j) * t.as_slice()[j];
                }
            }
        }
        for c in 0..3 {
            assert!((att.get(c) - expected[c]).abs() < 1e-9);
        }
        for i in 0..d {
            assert!((summary[i] - expected_summary[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn sigmoid_head_examples() {
        let bank = orthonormal_bank(3, 2);
        let v = bank.prototype(1).clone();
        let q = ProbabilityVector::new(vec![0.3, 0.7]).unwrap();
        let zero = ViluWeights::new(identity(3), identity(3), identity(3), zero_head(3, 0.0), None).unwrap();
        assert_eq!(vilu_u(&v, &bank, &q, &zero).unwrap(), 0.5);
        let hot = ViluWeights::new(identity(3), identity(3), identity(3), zero_head(3, 20.0), None).unwrap();
        assert!((vilu_u(&v, &bank, &q, &hot).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn two_class_bundle_matches_hand_forward() {
        // D = 2, orthonormal prototypes, identity projections, scale 1.
        let bank = orthonormal_bank(2, 2);
        let v = Embedding::from_unit(vec![0.6, 0.8]).unwrap();
        let q = ProbabilityVector::new(vec![0.45, 0.55]).unwrap();
        let hidden = DenseLayer {
            weight: Matrix::from_rows(&[
                [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                [0.0, 0.0, -1.0, 1.0, 0.5, -0.5],
            ])
            .unwrap(),
            bias: vec![-0.5, 0.1],
            activation: Activation::Relu,
        };
        let out = DenseLayer {
            weight: Matrix::from_rows(&[[2.0, -1.0]]).unwrap(),
            bias: vec![0.25],
            activation: Activation::Identity,
        };
        let w = ViluWeights::new(identity(2), identity(2), identity(2), vec![hidden, out], Some(1.0)).unwrap();
        let u = vilu_u(&v, &bank, &q, &w).unwrap();

        // Attention logits are v.t_j = [0.6, 0.8].
        let a0 = 0.6f64.exp() / (0.6f64.exp() + 0.8f64.exp());
        let a1 = 1.0 - a0;
        let summary = [a0, a1];
        let top = [0.0, 1.0];
        let h0 = (0.6f64 - 0.5).max(0.0);
        let h1 = (-top[0] + top[1] + 0.5 * summary[0] - 0.5 * summary[1] + 0.1f64).max(0.0);
        let g = 2.0 * h0 - h1 + 0.25;
        let expected = 1.0 / (1.0 + (-g).exp());
        assert!((u - expected).abs() < 1e-12);
    }

    #[test]
    fn weight_validation() {
        let bad_q = ViluWeights::new(Matrix::zeros(2, 3), identity(2), identity(2), zero_head(2, 0.0), None);
        assert!(bad_q.is_err());
        let two_out = vec![DenseLayer {
            weight: Matrix::zeros(2, 6),
            bias: vec![0.0; 2],
            activation: Activation::Tanh,
        }];
        assert!(ViluWeights::new(identity(2), identity(2), identity(2), two_out, None).is_err());
        let wrong_in = vec![DenseLayer {
            weight: Matrix::zeros(1, 5),
            bias: vec![0.0],
            activation: Activation::Identity,
        }];
        assert!(ViluWeights::new(identity(2), identity(2), identity(2), wrong_in, None).is_err());
        assert!(ViluWeights::new(identity(2), identity(2), identity(2), zero_head(2, 0.0), Some(0.0)).is_err());

        let w = ViluWeights::new(identity(2), identity(2), identity(2), zero_head(2, 0.0), None).unwrap();
        assert!((w.attention_scale - 2f64.sqrt()).abs() < 1e-15);
        let bank = orthonormal_bank(3, 2);
        let q = ProbabilityVector::uniform(2);
        assert!(vilu_u(bank.prototype(0), &bank, &q, &w).is_err());
    }

    #[test]
    fn heuristic_examples() {
        assert!((heuristic_signals(&ProbabilityVector::uniform(4)).u - 1.0).abs() < 1e-12);
        assert_eq!(heuristic_signals(&ProbabilityVector::one_hot(4, 2)).u, 0.0);
        let q = ProbabilityVector::new(vec![0.7, 0.2, 0.1]).unwrap();
        let s = heuristic_signals(&q);
        let h = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        assert!((s.u - h / 3f64.ln()).abs() < 1e-12);
        assert!((s.u - 0.729_846_699_162_097_4).abs() < 1e-9);
        assert_eq!(s.attention, q);
    }

    #[test]
    fn oracle_examples() {
        let s = oracle_signals(&ProbabilityVector::new(vec![0.9, 0.1]).unwrap(), 0).unwrap();
        assert_eq!((s.u, s.attention.as_slice()), (0.0, &[1.0, 0.0][..]));
        let s = oracle_signals(&ProbabilityVector::new(vec![0.4, 0.6]).unwrap(), 0).unwrap();
        assert_eq!((s.u, s.attention.as_slice()), (1.0, &[1.0, 0.0][..]));
        let s = oracle_signals(&ProbabilityVector::new(vec![0.5, 0.5]).unwrap(), 0).unwrap();
        assert_eq!(s.u, 0.0);
        assert!(oracle_signals(&ProbabilityVector::uniform(2), 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn providers_emit_valid_signals(seed in 0u64..10_000, d in 2usize..8, c in 2usize..6, bias in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank = PrototypeBank::unnamed((0..c).map(|_| random_unit(&mut rng, d)).collect()).unwrap();
            let hidden = DenseLayer { weight: random_matrix(&mut rng, 4, 3 * d), bias: vec![0.1; 4], activation: Activation::Tanh };
            let out = DenseLayer { weight: random_matrix(&mut rng, 1, 4), bias: vec![bias], activation: Activation::Identity };
            let w = ViluWeights::new(random_matrix(&mut rng, d, d), random_matrix(&mut rng, d, d), random_matrix(&mut rng, d, d), vec![hidden, out], None).unwrap();
            let vilu = ViluProvider::new(w).unwrap();
            let v = random_unit(&mut rng, d);
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let q = ProbabilityVector::new(raw.iter().map(|x| x / s).collect()).unwrap();
            let providers: [&dyn FailureProvider; 2] = [&HeuristicProvider, &vilu];
            for p in providers {
                let a = p.signals(&v, &q, &bank).unwrap();
                let b = p.signals(&v, &q, &bank).unwrap();
                prop_assert!((0.0..=1.0).contains(&a.u));
                prop_assert!((a.attention.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert_eq!(a, b);
            }
        }
    }
}
