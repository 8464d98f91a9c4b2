//! One transductive window: calibration split plus a test mini-batch.

use rand::Rng;
use serde::Serialize;

use crate::conformal::{calibrate, sample_scores, ConformalThreshold, FailureAwareParams, PredictionSet, ScoreRule};
use crate::error::{LataError, Result};
use crate::graph::build_graph;
use crate::matrix::Matrix;
use crate::metrics::EvaluationRecord;
use crate::model::{argmax, zero_shot_matrix, Embedding, LabeledExample, PrototypeBank, TestExample};
use crate::refine::{apply_prior, refine, restore_topk, truncate_topk, ClassPrior, RefineConfig};
use crate::signals::{pool_signals, FailureProvider};

/// Test batches of `W - n` items each; every window also holds all `n`
/// calibration items. The last batch may be shorter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WindowPlan {
    pub window_size: usize,
    pub n_cal: usize,
    pub test_batches: Vec<std::ops::Range<usize>>,
}

impl WindowPlan {
    pub fn new(window_size: usize, n_cal: usize, n_test: usize) -> Result<Self> {
        if n_cal == 0 {
            return Err(LataError::Config("calibration split is empty".into()));
        }
        if n_cal >= window_size {
            return Err(LataError::Config(format!(
                "window {window_size} must exceed the calibration size {n_cal}; raise the window"
            )));
        }
        let step = window_size - n_cal;
        let test_batches = (0..n_test)
            .step_by(step)
            .map(|s| s..(s + step).min(n_test))
            .collect();
        Ok(Self {
            window_size,
            n_cal,
            test_batches,
        })
    }
}

/// Everything a window needs besides the data.
pub struct WindowSettings<'a> {
    pub bank: &'a PrototypeBank,
    pub provider: &'a dyn FailureProvider,
    pub tau: f64,
    pub k: usize,
    pub sigma: Option<f64>,
    pub refine: RefineConfig,
    /// Needed when `refine.beta > 0`.
    pub prior: Option<&'a ClassPrior>,
    pub rule: ScoreRule,
    pub failure: FailureAwareParams,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct WindowOutput {
    pub sets: Vec<PredictionSet>,
    /// One per labeled test item, in batch order.
    pub records: Vec<EvaluationRecord>,
    pub threshold: Option<ConformalThreshold>,
    pub gated_fraction: f64,
    /// Bytes held by the pool matrices and graph.
    pub working_bytes: usize,
}

impl WindowSettings<'_> {
    fn refines(&self) -> bool {
        self.refine.gamma > 0.0 && self.refine.t_iter > 0
    }
}

/// Zero-shot scoring, optional prior, graph refinement, failure signals,
/// in-window calibration and test prediction sets.
///
/// `u_rng` supplies one randomization draw per pool item (calibration
/// first) when the score rule is randomized.
pub fn run_window<R: Rng + ?Sized>(
    cal: &[LabeledExample],
    batch: &[TestExample],
    settings: &WindowSettings<'_>,
    u_rng: &mut R,
) -> Result<WindowOutput> {
    if batch.is_empty() {
        return Ok(WindowOutput {
            sets: Vec::new(),
            records: Vec::new(),
            threshold: None,
            gated_fraction: 0.0,
            working_bytes: 0,
        });
    }
    if cal.is_empty() {
        return Err(LataError::InvalidInput("calibration split is empty".into()));
    }
    let bank = settings.bank;
    let c = bank.n_classes();
    let pool: Vec<&Embedding> = cal
        .iter()
        .map(|e| &e.embedding)
        .chain(batch.iter().map(|e| &e.embedding))
        .collect();
    let n = pool.len();

    let mut q = zero_shot_matrix(pool.iter().copied(), bank, settings.tau)?;
    if settings.refine.beta > 0.0 {
        let prior = settings
            .prior
            .ok_or_else(|| LataError::Config("beta > 0 needs a class prior".into()))?;
        q = apply_prior(&q, prior, settings.refine.beta)?;
    }
    let owned: Vec<Embedding> = pool.iter().map(|e| (*e).clone()).collect();
    let signals = pool_signals(settings.provider, &owned, &q, bank)?;

    let mut working = 2 * n * c * std::mem::size_of::<f64>();
    let mut gated_fraction = 0.0;
    let z = if settings.refines() && n >= 2 {
        let graph = build_graph(&owned, settings.k.min(n - 1), settings.sigma)?;
        working += graph.memory_bytes();
        let u: Vec<f64> = signals.iter().map(|s| s.u).collect();
        let kappa = settings.refine.kappa.unwrap_or(c).min(c);
        let (z, trace) = if kappa < c {
            let (qt, masks) = truncate_topk(&q, kappa)?;
            working += n * c * std::mem::size_of::<f64>();
            let (zt, trace) = refine(&qt, &graph, &settings.refine, Some(&u))?;
            (restore_topk(&zt, &q, &masks)?, trace)
        } else {
            refine(&q, &graph, &settings.refine, Some(&u))?
        };
        gated_fraction = trace.gated_fraction;
        z
    } else {
        q
    };

    let scores: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let u = settings.rule.draw_u(u_rng);
            sample_scores(z.row(i), &signals[i], &settings.rule, &settings.failure, u)
        })
        .collect::<Result<_>>()?;
    let cal_scores: Vec<f64> = cal.iter().zip(&scores).map(|(e, s)| s[e.label]).collect();
    let threshold = calibrate(&cal_scores, settings.alpha)?;

    let mut sets = Vec::with_capacity(batch.len());
    let mut records = Vec::new();
    for (j, item) in batch.iter().enumerate() {
        let i = cal.len() + j;
        let set = PredictionSet::from_scores(&scores[i], &threshold.s_hat);
        if let Some(y) = item.label {
            records.push(EvaluationRecord {
                true_label: y,
                prediction_set: set.clone(),
                point_prediction: argmax(z.row(i)),
            });
        }
        sets.push(set);
    }
    Ok(WindowOutput {
        sets,
        records,
        threshold: Some(threshold),
        gated_fraction,
        working_bytes: working + owned.len() * bank.dim() * std::mem::size_of::<f64>(),
    })
}

/// Plain refined probabilities for a pool, used by benches and diagnostics.
pub fn refined_pool(pool: &[Embedding], settings: &WindowSettings<'_>) -> Result<Matrix> {
    let q = zero_shot_matrix(pool.iter(), settings.bank, settings.tau)?;
    if !settings.refines() || pool.len() < 2 {
        return Ok(q);
    }
    let graph = build_graph(pool, settings.k.min(pool.len() - 1), settings.sigma)?;
    Ok(refine(&q, &graph, &settings.refine, None)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{all_scores, ScoreKind};
    use crate::harness::synthetic::{generate_synthetic, SyntheticSpec};
    use crate::signals::HeuristicProvider;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn settings<'a>(bank: &'a PrototypeBank, provider: &'a dyn FailureProvider) -> WindowSettings<'a> {
        WindowSettings {
            bank,
            provider,
            tau: 1.0,
            k: 15,
            sigma: None,
            refine: RefineConfig::default(),
            prior: None,
            rule: ScoreRule::default(),
            failure: FailureAwareParams::default(),
            alpha: 0.1,
        }
    }

    #[test]
    fn plan_examples() {
        let p = WindowPlan::new(256, 80, 920).unwrap();
        assert_eq!(p.test_batches.len(), 6);
        assert_eq!(p.test_batches[0], 0..176);
        assert_eq!(p.test_batches[5], 880..920);
        assert!(WindowPlan::new(80, 80, 10).is_err());
        assert!(WindowPlan::new(100, 20, 0).unwrap().test_batches.is_empty());
    }

    #[test]
    fn empty_batch_yields_nothing() {
        let data = generate_synthetic(&SyntheticSpec { n_cal: 20, n_test: 5, ..Default::default() }).unwrap();
        let s = settings(&data.bank, &HeuristicProvider);
        let out = run_window(&data.cal, &[], &s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.sets.is_empty() && out.records.is_empty() && out.threshold.is_none());
    }

    #[test]
    fn disabled_components_reproduce_plain_scp() {
        let data = generate_synthetic(&SyntheticSpec { n_cal: 40, n_test: 60, ..Default::default() }).unwrap();
        for kind in [ScoreKind::Lac, ScoreKind::Aps, ScoreKind::Raps] {
            let mut s = settings(&data.bank, &HeuristicProvider);
            s.refine.gamma = 0.0;
            s.failure = FailureAwareParams::OFF;
            s.rule = ScoreRule::of(kind);
            let out = run_window(&data.cal, &data.test, &s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

            let probs = |e: &Embedding| crate::model::zero_shot_probs(e, &data.bank, 1.0).unwrap().into_vec();
            let cal_scores: Vec<f64> = data
                .cal
                .iter()
                .map(|e| all_scores(&probs(&e.embedding), &s.rule, 1.0)[e.label])
                .collect();
            let t = calibrate(&cal_scores, 0.1).unwrap();
            for (set, item) in out.sets.iter().zip(&data.test) {
                let expected = PredictionSet::from_scores(&all_scores(&probs(&item.embedding), &s.rule, 1.0), &t.s_hat);
                assert_eq!(set, &expected);
            }
        }
    }

    #[test]
    fn duplicated_items_stay_identical() {
        let data = generate_synthetic(&SyntheticSpec { n_cal: 10, n_test: 10, ..Default::default() }).unwrap();
        let a = data.test[0].embedding.clone();
        let b = data.test[1].embedding.clone();
        let pool = vec![a.clone(), a, b.clone(), b];
        let mut s = settings(&data.bank, &HeuristicProvider);
        // Complete graph: with fewer neighbors the index tie-break would
        // give the two copies different neighborhoods.
        s.k = 3;
        let z = refined_pool(&pool, &s).unwrap();
        assert_eq!(z.row(0), z.row(1));
        assert_eq!(z.row(2), z.row(3));
    }

    #[test]
    fn randomized_u_consumes_one_draw_per_item() {
        let data = generate_synthetic(&SyntheticSpec { n_cal: 20, n_test: 30, ..Default::default() }).unwrap();
        let mut s = settings(&data.bank, &HeuristicProvider);
        s.rule.randomize = true;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        run_window(&data.cal, &data.test, &s, &mut rng).unwrap();
        let mut expected = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let _: f64 = expected.random();
        }
        assert_eq!(rng.random::<u64>(), expected.random::<u64>());
    }
}
