//! Negative control: fit a probe on the calibration labels, then calibrate
//! on the same split. This breaks exchangeability and should under-cover.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::conformal::{all_scores, calibrate, PredictionSet};
use crate::error::{LataError, Result};
use crate::metrics::{AggregateReport, ConformalReport, EvaluationRecord};
use crate::model::{argmax, zero_shot_matrix, Embedding, LabeledExample, PrototypeBank, TestExample};
use crate::signals::FailureProvider;

use super::experiment::{collect_trials, evaluate_trial, parallel_trials, prepare_trial, DataSource, FailedTrial};

/// Normalized per-class means of the calibration embeddings.
pub fn fit_probe(cal: &[LabeledExample], n_classes: usize) -> Result<PrototypeBank> {
    let dim = cal
        .first()
        .ok_or_else(|| LataError::InvalidInput("empty calibration split".into()))?
        .embedding
        .dim();
    let mut sums = vec![vec![0.0; dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for e in cal {
        if e.label >= n_classes {
            return Err(LataError::InvalidInput(format!("label {} out of range", e.label)));
        }
        counts[e.label] += 1;
        for (s, x) in sums[e.label].iter_mut().zip(e.embedding.as_slice()) {
            *s += x;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(LataError::Data(format!("class {c} is absent from calibration; probe undefined")));
    }
    let protos = sums
        .iter()
        .map(|s| Embedding::normalize(s))
        .collect::<Result<Vec<_>>>()?;
    PrototypeBank::unnamed(protos)
}

/// Probe fitted on `cal`, split conformal calibrated on the same `cal`.
/// All test items must be labeled.
pub fn double_dip_control(
    cal: &[LabeledExample],
    test: &[TestExample],
    n_classes: usize,
    cfg: &RunConfig,
    u_seed: u64,
) -> Result<ConformalReport> {
    let probe = fit_probe(cal, n_classes)?;
    let rule = cfg.score_rule();
    let mut rng = ChaCha8Rng::seed_from_u64(u_seed);
    let q_cal = zero_shot_matrix(cal.iter().map(|e| &e.embedding), &probe, cfg.tau)?;
    let cal_scores: Vec<f64> = cal
        .iter()
        .enumerate()
        .map(|(i, e)| all_scores(q_cal.row(i), &rule, rule.draw_u(&mut rng))[e.label])
        .collect();
    let threshold = calibrate(&cal_scores, cfg.alpha)?;
    let q_test = zero_shot_matrix(test.iter().map(|e| &e.embedding), &probe, cfg.tau)?;
    let records = test
        .iter()
        .enumerate()
        .map(|(j, e)| {
            let y = e
                .label
                .ok_or_else(|| LataError::Data("control needs labeled test items".into()))?;
            let scores = all_scores(q_test.row(j), &rule, rule.draw_u(&mut rng));
            Ok(EvaluationRecord {
                true_label: y,
                prediction_set: PredictionSet::from_scores(&scores, &threshold.s_hat),
                point_prediction: argmax(q_test.row(j)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ConformalReport::from_records(&records, cfg.alpha, n_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlTrial {
    pub trial: usize,
    pub probe: ConformalReport,
    pub lata: ConformalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlReport {
    pub probe: AggregateReport,
    pub lata: AggregateReport,
    pub trials: Vec<ControlTrial>,
    pub failed_trials: Vec<FailedTrial>,
}

/// The illegal probe baseline and the configured pipeline on identical
/// trials (same data, same calibration split).
pub fn run_control(cfg: &RunConfig, source: &DataSource, provider: &dyn FailureProvider) -> Result<ControlReport> {
    cfg.validate()?;
    let results = parallel_trials(cfg.workers, cfg.trials, |t| -> Result<ControlTrial> {
        let prepared = prepare_trial(cfg, source, t)?;
        let data = prepared.data.as_ref();
        let probe = double_dip_control(&prepared.cal, &data.test, data.n_classes(), cfg, prepared.seeds.scoring)?;
        let lata = evaluate_trial(cfg, &prepared, provider, t)?.report;
        Ok(ControlTrial { trial: t, probe, lata })
    })?;
    let (trials, failed_trials) = collect_trials(results)?;
    let probe: Vec<ConformalReport> = trials.iter().map(|t| t.probe.clone()).collect();
    let lata: Vec<ConformalReport> = trials.iter().map(|t| t.lata.clone()).collect();
    Ok(ControlReport {
        probe: AggregateReport::from_reports(&probe),
        lata: AggregateReport::from_reports(&lata),
        trials,
        failed_trials,
    })
}
