//! Nonconformity scores, split-conformal calibration and prediction sets.

use rand::Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{LataError, Result};
use crate::signals::FailureSignals;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Lac,
    Aps,
    Raps,
}

impl std::str::FromStr for ScoreKind {
    type Err = LataError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lac" => Ok(Self::Lac),
            "aps" => Ok(Self::Aps),
            "raps" => Ok(Self::Raps),
            other => Err(LataError::Config(format!("unknown score rule '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRule {
    pub kind: ScoreKind,
    /// RAPS rank cutoff.
    pub k_reg: usize,
    /// RAPS penalty per rank beyond `k_reg`.
    pub gamma_raps: f64,
    /// Draw `U ~ Uniform[0, 1)` per sample instead of using `u_value`.
    pub randomize: bool,
    pub u_value: f64,
}

impl Default for ScoreRule {
    fn default() -> Self {
        Self {
            kind: ScoreKind::Aps,
            k_reg: 1,
            gamma_raps: 1e-3,
            randomize: false,
            u_value: 1.0,
        }
    }
}

impl ScoreRule {
    pub fn of(kind: ScoreKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_raps >= 0.0 && self.gamma_raps.is_finite()) {
            return Err(LataError::Config(format!(
                "gamma_raps must be >= 0, got {}",
                self.gamma_raps
            )));
        }
        if !(0.0..=1.0).contains(&self.u_value) {
            return Err(LataError::Config(format!("U must be in [0, 1], got {}", self.u_value)));
        }
        Ok(())
    }

    /// The `U` for one sample; consumes one draw only in randomized mode.
    pub fn draw_u<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.randomize {
            rng.random::<f64>()
        } else {
            self.u_value
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureAwareParams {
    pub lambda: f64,
    pub eta: f64,
}

impl Default for FailureAwareParams {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            eta: 0.25,
        }
    }
}

impl FailureAwareParams {
    pub const OFF: Self = Self {
        lambda: 0.0,
        eta: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("eta", self.eta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LataError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_label(z: &[f64], y: usize) -> Result<()> {
    if y >= z.len() {
        return Err(LataError::InvalidInput(format!(
            "label {y} out of range for {} classes",
            z.len()
        )));
    }
    Ok(())
}

/// Class indices by descending probability, ties by ascending index.
pub fn rank_order(z: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    order
}

pub fn score_lac(z: &[f64], y: usize) -> Result<f64> {
    check_label(z, y)?;
    Ok(1.0 - z[y])
}

/// Mass ranked strictly above `y` plus `u * z_y`.
pub fn score_aps(z: &[f64], y: usize, u: f64) -> Result<f64> {
    check_label(z, y)?;
    Ok(aps_and_rank(z, y).0 + u * z[y])
}

fn aps_and_rank(z: &[f64], y: usize) -> (f64, usize) {
    let mut above = 0.0;
    for (r, &k) in rank_order(z).iter().enumerate() {
        if k == y {
            return (above, r + 1);
        }
        above += z[k];
    }
    unreachable!("label checked against class count")
}

/// APS plus `gamma_raps * max(0, rank(y) - k_reg)` with 1-based ranks.
pub fn score_raps(z: &[f64], y: usize, k_reg: usize, gamma_raps: f64, u: f64) -> Result<f64> {
    check_label(z, y)?;
    let (above, rank) = aps_and_rank(z, y);
    Ok(above + u * z[y] + gamma_raps * rank.saturating_sub(k_reg) as f64)
}

/// Base scores for every label, bitwise equal to the single-label functions.
pub fn all_scores(z: &[f64], rule: &ScoreRule, u: f64) -> Vec<f64> {
    if rule.kind == ScoreKind::Lac {
        return z.iter().map(|p| 1.0 - p).collect();
    }
    let mut out = vec![0.0; z.len()];
    let mut above = 0.0;
    for (r, &k) in rank_order(z).iter().enumerate() {
        let mut s = above + u * z[k];
        if rule.kind == ScoreKind::Raps {
            s += rule.gamma_raps * (r + 1).saturating_sub(rule.k_reg) as f64;
        }
        out[k] = s;
        above += z[k];
    }
    out
}

pub fn base_score(z: &[f64], y: usize, rule: &ScoreRule, u: f64) -> Result<f64> {
    match rule.kind {
        ScoreKind::Lac => score_lac(z, y),
        ScoreKind::Aps => score_aps(z, y, u),
        ScoreKind::Raps => score_raps(z, y, rule.k_reg, rule.gamma_raps, u),
    }
}

/// `base * (1 + lambda u) - eta * attention_y`; may be negative.
pub fn score_failure_aware(base: f64, u: f64, attention_y: f64, params: &FailureAwareParams) -> f64 {
    base * (1.0 + params.lambda * u) - params.eta * attention_y
}

/// Failure-aware scores for every label of one sample.
pub fn sample_scores(
    z: &[f64],
    signals: &FailureSignals,
    rule: &ScoreRule,
    params: &FailureAwareParams,
    u_rand: f64,
) -> Result<Vec<f64>> {
    if signals.attention.len() != z.len() {
        return Err(LataError::dims("attention classes", z.len(), signals.attention.len()));
    }
    let mut s = all_scores(z, rule, u_rand);
    for (sk, a) in s.iter_mut().zip(signals.attention.as_slice()) {
        *sk = score_failure_aware(*sk, signals.u, *a, params);
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Value(f64),
    /// The calibration rank exceeds `n`: every label is admitted.
    AllLabels,
}

impl Threshold {
    pub fn admits(&self, score: f64) -> bool {
        match *self {
            Threshold::Value(t) => score <= t,
            Threshold::AllLabels => true,
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Threshold::Value(t) => t,
            Threshold::AllLabels => f64::INFINITY,
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Threshold::Value(t) => s.serialize_f64(t),
            Threshold::AllLabels => s.serialize_str("all_labels"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConformalThreshold {
    pub s_hat: Threshold,
    pub n_cal: usize,
    pub alpha: f64,
}

/// 1-based rank `ceil((n + 1)(1 - alpha))` of the calibration quantile.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    // The guard absorbs products such as 10 * 0.9 landing just above 9.
    ((n as f64 + 1.0) * (1.0 - alpha) - 1e-9).ceil().max(1.0) as usize
}

pub fn calibrate(scores: &[f64], alpha: f64) -> Result<ConformalThreshold> {
    if scores.is_empty() {
        return Err(LataError::InvalidInput("no calibration scores".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(LataError::InvalidInput(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(LataError::InvalidInput(format!(
            "calibration score {i} is {}",
            scores[i]
        )));
    }
    let n = scores.len();
    let rank = quantile_rank(n, alpha);
    let s_hat = if rank > n {
        Threshold::AllLabels
    } else {
        let mut sorted = scores.to_vec();
        let (_, kth, _) = sorted.select_nth_unstable_by(rank - 1, f64::total_cmp);
        Threshold::Value(*kth)
    };
    Ok(ConformalThreshold {
        s_hat,
        n_cal: n,
        alpha,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
#[serde(transparent)]
pub struct PredictionSet {
    members: Vec<usize>,
}

impl PredictionSet {
    pub fn new(mut members: Vec<usize>) -> Self {
        members.sort_unstable();
        members.dedup();
        Self { members }
    }

    pub fn full(n_classes: usize) -> Self {
        Self {
            members: (0..n_classes).collect(),
        }
    }

    /// Labels whose score passes the threshold.
    pub fn from_scores(scores: &[f64], threshold: &Threshold) -> Self {
        Self {
            members: (0..scores.len()).filter(|&k| threshold.admits(scores[k])).collect(),
        }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn contains(&self, y: usize) -> bool {
        self.members.binary_search(&y).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// All labels whose failure-aware score is at most the threshold.
pub fn predict_set(
    z: &[f64],
    signals: &FailureSignals,
    rule: &ScoreRule,
    params: &FailureAwareParams,
    threshold: &ConformalThreshold,
    u_rand: f64,
) -> Result<PredictionSet> {
    let scores = sample_scores(z, signals, rule, params, u_rand)?;
    Ok(PredictionSet::from_scores(&scores, &threshold.s_hat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProbabilityVector;
    use crate::signals::heuristic_signals;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const Z: [f64; 3] = [0.5, 0.3, 0.2];

    fn plain(z: &[f64]) -> FailureSignals {
        FailureSignals {
            u: 0.0,
            attention: ProbabilityVector::uniform(z.len()),
        }
    }

    #[test]
    fn lac_examples() {
        assert!((score_lac(&[0.7, 0.2, 0.1], 0).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(score_lac(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert_eq!(score_lac(&[0.25; 4], 3).unwrap(), 0.75);
        assert!(score_lac(&Z, 3).is_err());
    }

    #[test]
    fn aps_examples() {
        assert!((score_aps(&Z, 1, 1.0).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(score_aps(&Z, 0, 1.0).unwrap(), 0.5);
        assert!((score_aps(&Z, 1, 0.5).unwrap() - (0.5 + 0.5 * 0.3)).abs() < 1e-12);
        assert!((score_aps(&Z, 1, 0.5).unwrap() - 0.65).abs() < 1e-9);
        // Ties rank the lower index first.
        assert_eq!(score_aps(&[0.4, 0.4, 0.2], 1, 1.0).unwrap(), 0.8);
        assert!(score_aps(&Z, 5, 1.0).is_err());
    }

    #[test]
    fn raps_examples() {
        let v = score_raps(&Z, 2, 1, 1e-3, 1.0).unwrap();
        assert!((v - (0.5 + 0.3 + 0.2 + 1e-3 * 2.0)).abs() < 1e-12);
        assert!((v - 1.002).abs() < 1e-9);
        assert_eq!(score_raps(&Z, 0, 1, 1e-3, 1.0).unwrap(), score_aps(&Z, 0, 1.0).unwrap());
        assert_eq!(score_raps(&Z, 1, 0, 0.0, 0.3).unwrap(), score_aps(&Z, 1, 0.3).unwrap());
    }

    #[test]
    fn failure_aware_examples() {
        let off = FailureAwareParams::OFF;
        assert_eq!(score_failure_aware(0.37, 0.8, 0.6, &off), 0.37);
        let v = score_failure_aware(0.3, 1.0, 0.4, &FailureAwareParams::default());
        assert!((v - (0.3 * 1.5 - 0.25 * 0.4)).abs() < 1e-12);
        assert!((v - 0.35).abs() < 1e-9);
        assert!(score_failure_aware(0.0, 0.3, 0.5, &FailureAwareParams::default()) < 0.0);
    }

    #[test]
    fn calibrate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nine: Vec<f64> = (0..9).map(|_| rng.random::<f64>()).collect();
        let t = calibrate(&nine, 0.1).unwrap();
        let max = nine.iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(t.s_hat, Threshold::Value(max));

        let nineteen: Vec<f64> = (0..19).map(|_| rng.random::<f64>()).collect();
        let mut sorted = nineteen.clone();
        sorted.sort_by(f64::total_cmp);
        let t = calibrate(&nineteen, 0.1).unwrap();
        assert_eq!(t.s_hat, Threshold::Value(sorted[17]));

        let t = calibrate(&[0.2], 0.1).unwrap();
        assert_eq!(t.s_hat, Threshold::AllLabels);
        assert_eq!(serde_json::to_string(&t.s_hat).unwrap(), "\"all_labels\"");

        assert!(calibrate(&[], 0.1).is_err());
        assert!(calibrate(&[0.1], 1.0).is_err());
        assert!(calibrate(&[f64::NAN], 0.1).is_err());
    }

    #[test]
    fn quantile_rank_examples() {
        assert_eq!(quantile_rank(9, 0.1), 9);
        assert_eq!(quantile_rank(19, 0.1), 18);
        assert_eq!(quantile_rank(1, 0.1), 2);
        assert_eq!(quantile_rank(80, 0.05), 77);
        assert_eq!(quantile_rank(99, 0.05), 95);
    }

    #[test]
    fn predict_set_examples() {
        let lac = ScoreRule::of(ScoreKind::Lac);
        let aps = ScoreRule::of(ScoreKind::Aps);
        let off = FailureAwareParams::OFF;
        let z = [0.7, 0.2, 0.1];
        let all = ConformalThreshold {
            s_hat: Threshold::AllLabels,
            n_cal: 1,
            alpha: 0.1,
        };
        assert_eq!(predict_set(&z, &plain(&z), &lac, &off, &all, 1.0).unwrap(), PredictionSet::full(3));
        let half = ConformalThreshold {
            s_hat: Threshold::Value(0.5),
            ..all
        };
        assert_eq!(predict_set(&z, &plain(&z), &lac, &off, &half, 1.0).unwrap().members(), &[0]);
        let t = ConformalThreshold {
            s_hat: Threshold::Value(0.8),
            ..all
        };
        assert_eq!(predict_set(&Z, &plain(&Z), &aps, &off, &t, 1.0).unwrap().members(), &[0, 1]);
    }

    fn simplex(raw: Vec<f64>) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn all_scores_match_single_label(raw in prop::collection::vec(0.001f64..1.0, 2..12), u in 0.0f64..1.0, k_reg in 0usize..4, g in 0.0f64..0.1) {
            let z = simplex(raw);
            for kind in [ScoreKind::Lac, ScoreKind::Aps, ScoreKind::Raps] {
                let rule = ScoreRule { kind, k_reg, gamma_raps: g, ..ScoreRule::default() };
                let all = all_scores(&z, &rule, u);
                for y in 0..z.len() {
                    prop_assert_eq!(all[y], base_score(&z, y, &rule, u).unwrap());
                }
            }
        }

        #[test]
        fn raps_without_penalty_is_aps(raw in prop::collection::vec(0.001f64..1.0, 2..12), u in 0.0f64..1.0, k_reg in 0usize..6) {
            let z = simplex(raw);
            for y in 0..z.len() {
                prop_assert_eq!(score_raps(&z, y, k_reg, 0.0, u).unwrap(), score_aps(&z, y, u).unwrap());
                prop_assert!(score_raps(&z, y, k_reg, 0.01, u).unwrap() >= score_aps(&z, y, u).unwrap());
            }
        }

        #[test]
        fn lac_sets_are_nested(raw in prop::collection::vec(0.001f64..1.0, 2..12), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let z = simplex(raw);
            let s = all_scores(&z, &ScoreRule::of(ScoreKind::Lac), 1.0);
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let a = PredictionSet::from_scores(&s, &Threshold::Value(lo));
            let b = PredictionSet::from_scores(&s, &Threshold::Value(hi));
            prop_assert!(a.members().iter().all(|&k| b.contains(k)));
            let top = crate::model::argmax(&z);
            if hi >= 1.0 - z[top] {
                prop_assert!(b.contains(top));
            }
        }

        #[test]
        fn calibrate_matches_sorted_oracle(scores in prop::collection::vec(-1.0f64..2.0, 1..200), alpha in 0.01f64..0.5) {
            let t = calibrate(&scores, alpha).unwrap();
            let n = scores.len();
            let rank = ((n as f64 + 1.0) * (1.0 - alpha) - 1e-9).ceil() as usize;
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            if rank > n {
                prop_assert_eq!(t.s_hat, Threshold::AllLabels);
            } else {
                prop_assert_eq!(t.s_hat, Threshold::Value(sorted[rank - 1]));
                let covered = scores.iter().filter(|&&s| s <= sorted[rank - 1]).count();
                prop_assert!(covered as f64 >= (n as f64 + 1.0) * (1.0 - alpha) - 1e-9);
            }
        }

        #[test]
        fn disabled_failure_terms_keep_base_sets(raw in prop::collection::vec(0.001f64..1.0, 2..10), t in 0.0f64..1.2, u in 0.0f64..1.0) {
            let z = simplex(raw);
            let q = ProbabilityVector::new(z.clone()).unwrap();
            let sig = heuristic_signals(&q);
            let rule = ScoreRule::default();
            let th = ConformalThreshold { s_hat: Threshold::Value(t), n_cal: 10, alpha: 0.1 };
            let with = predict_set(&z, &sig, &rule, &FailureAwareParams::OFF, &th, u).unwrap();
            let base = PredictionSet::from_scores(&all_scores(&z, &rule, u), &th.s_hat);
            prop_assert_eq!(with, base);
        }
    }

    #[test]
    fn two_class_top_label_aps_is_its_probability() {
        assert_eq!(score_aps(&[0.35, 0.65], 1, 1.0).unwrap(), 0.65);
    }
}
