//! Coverage, set size, class-conditioned coverage gap and balanced accuracy.

use serde::Serialize;

use crate::conformal::PredictionSet;
use crate::error::{LataError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EvaluationRecord {
    pub true_label: usize,
    pub prediction_set: PredictionSet,
    pub point_prediction: usize,
}

fn non_empty(records: &[EvaluationRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(LataError::InvalidInput("no evaluation records".into()));
    }
    Ok(())
}

pub fn coverage(records: &[EvaluationRecord]) -> Result<f64> {
    non_empty(records)?;
    let hit = records
        .iter()
        .filter(|r| r.prediction_set.contains(r.true_label))
        .count();
    Ok(hit as f64 / records.len() as f64)
}

pub fn mean_size(records: &[EvaluationRecord]) -> Result<f64> {
    non_empty(records)?;
    let total: usize = records.iter().map(|r| r.prediction_set.len()).sum();
    Ok(total as f64 / records.len() as f64)
}

/// Per-class `(count, covered, correct)`, indexed by class.
fn per_class(records: &[EvaluationRecord], n_classes: usize) -> Result<Vec<(usize, usize, usize)>> {
    let mut stats = vec![(0, 0, 0); n_classes];
    for r in records {
        if r.true_label >= n_classes {
            return Err(LataError::InvalidInput(format!(
                "label {} out of range for {n_classes} classes",
                r.true_label
            )));
        }
        let s = &mut stats[r.true_label];
        s.0 += 1;
        s.1 += r.prediction_set.contains(r.true_label) as usize;
        s.2 += (r.point_prediction == r.true_label) as usize;
    }
    Ok(stats)
}

/// Classes with no record; they are left out of [`ccv`] and [`aca`].
pub fn absent_classes(records: &[EvaluationRecord], n_classes: usize) -> Result<usize> {
    Ok(per_class(records, n_classes)?
        .iter()
        .filter(|s| s.0 == 0)
        .count())
}

/// `100 * mean_c |cov_c - (1 - alpha)|` over classes present in `records`.
pub fn ccv(records: &[EvaluationRecord], alpha: f64, n_classes: usize) -> Result<f64> {
    non_empty(records)?;
    let target = 1.0 - alpha;
    let present: Vec<f64> = per_class(records, n_classes)?
        .iter()
        .filter(|s| s.0 > 0)
        .map(|s| (s.1 as f64 / s.0 as f64 - target).abs())
        .collect();
    Ok(100.0 * present.iter().sum::<f64>() / present.len() as f64)
}

/// `100 * mean_c acc_c` over classes present in `records`.
pub fn aca(records: &[EvaluationRecord], n_classes: usize) -> Result<f64> {
    non_empty(records)?;
    let present: Vec<f64> = per_class(records, n_classes)?
        .iter()
        .filter(|s| s.0 > 0)
        .map(|s| s.2 as f64 / s.0 as f64)
        .collect();
    Ok(100.0 * present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformalReport {
    pub coverage: f64,
    pub mean_size: f64,
    /// Scaled by 100.
    pub ccv: f64,
    /// Scaled by 100.
    pub aca: f64,
    pub n_test: usize,
    pub alpha: f64,
    pub excluded_classes: usize,
    /// Wall-clock time; kept out of serialized reports so they stay reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
    /// Analytic size of the main working buffers, not an OS measurement.
    pub peak_mem_estimate: usize,
}

impl ConformalReport {
    pub fn from_records(records: &[EvaluationRecord], alpha: f64, n_classes: usize) -> Result<Self> {
        Ok(Self {
            coverage: coverage(records)?,
            mean_size: mean_size(records)?,
            ccv: ccv(records, alpha, n_classes)?,
            aca: aca(records, n_classes)?,
            n_test: records.len(),
            alpha,
            excluded_classes: absent_classes(records, n_classes)?,
            wall_time_s: 0.0,
            peak_mem_estimate: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and (n - 1) standard deviation; std is 0 for one value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }

    /// Standard error of the mean.
    pub fn sem(&self, n: usize) -> f64 {
        self.std / (n as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateReport {
    pub trials: usize,
    pub coverage: MeanStd,
    pub mean_size: MeanStd,
    pub ccv: MeanStd,
    pub aca: MeanStd,
}

impl AggregateReport {
    pub fn from_reports(reports: &[ConformalReport]) -> Self {
        let pick = |f: fn(&ConformalReport) -> f64| {
            MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>())
        };
        Self {
            trials: reports.len(),
            coverage: pick(|r| r.coverage),
            mean_size: pick(|r| r.mean_size),
            ccv: pick(|r| r.ccv),
            aca: pick(|r| r.aca),
        }
    }
}
