//! Seeded multi-trial experiments and one-parameter ablations.

use std::borrow::Cow;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ProviderKind, RunConfig};
use crate::error::{LataError, Result};
use crate::io::{load_dataset, load_vilu_bundle, Dataset};
use crate::metrics::{AggregateReport, ConformalReport};
use crate::model::LabeledExample;
use crate::refine::estimate_prior;
use crate::signals::{FailureProvider, HeuristicProvider, ViluProvider};

use super::sampling::sample_kshot;
use super::synthetic::{generate_synthetic, SyntheticSpec};
use super::window::{run_window, WindowPlan, WindowSettings};

/// Where trial data comes from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// A fresh dataset per trial; calibration pool and test set are redrawn together.
    Synthetic(SyntheticSpec),
    /// One dataset; only the calibration split is resampled per trial.
    Fixed(Dataset),
}

impl DataSource {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        match (&cfg.data, &cfg.synthetic) {
            (Some(d), None) => Ok(Self::Fixed(load_dataset(d)?)),
            (None, Some(s)) => Ok(Self::Synthetic(s.clone())),
            (None, None) => Err(LataError::Config("no dataset or synthetic spec given".into())),
            (Some(_), Some(_)) => Err(LataError::Config(
                "give either a dataset or a synthetic spec, not both".into(),
            )),
        }
    }
}

pub fn build_provider(cfg: &RunConfig) -> Result<Box<dyn FailureProvider>> {
    match cfg.provider {
        ProviderKind::Heuristic => Ok(Box::new(HeuristicProvider)),
        ProviderKind::Vilu => {
            let path = cfg
                .vilu_bundle
                .as_ref()
                .ok_or_else(|| LataError::Config("provider 'vilu' needs a weight bundle".into()))?;
            Ok(Box::new(ViluProvider::new(load_vilu_bundle(path)?)?))
        }
    }
}

/// Independent seeds for the three random stages of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TrialSeeds {
    pub data: u64,
    pub sampling: u64,
    pub scoring: u64,
}

/// Stream `trial` of a ChaCha8 generator keyed by `base`; the first three
/// outputs seed data generation, calibration sampling and score draws.
pub fn trial_seeds(base: u64, trial: usize) -> TrialSeeds {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(trial as u64);
    TrialSeeds {
        data: rng.next_u64(),
        sampling: rng.next_u64(),
        scoring: rng.next_u64(),
    }
}

/// Data and calibration split of one trial.
pub struct PreparedTrial<'a> {
    pub seeds: TrialSeeds,
    pub data: Cow<'a, Dataset>,
    pub cal: Vec<LabeledExample>,
}

fn label_frequencies(pool: &[LabeledExample], n_classes: usize) -> Vec<f64> {
    let mut f = vec![0.0; n_classes];
    for e in pool {
        f[e.label] += 1.0 / pool.len() as f64;
    }
    let s: f64 = f.iter().sum();
    f.iter().map(|x| x / s).collect()
}

pub fn prepare_trial<'a>(cfg: &RunConfig, source: &'a DataSource, trial: usize) -> Result<PreparedTrial<'a>> {
    let seeds = trial_seeds(cfg.seed, trial);
    let (data, marginals) = match source {
        DataSource::Synthetic(spec) => {
            let spec = SyntheticSpec {
                seed: seeds.data,
                ..spec.clone()
            };
            (Cow::Owned(generate_synthetic(&spec)?), spec.marginals())
        }
        DataSource::Fixed(d) => {
            if d.cal.is_empty() {
                return Err(LataError::Data("dataset has no calibration pool".into()));
            }
            (Cow::Borrowed(d), label_frequencies(&d.cal, d.n_classes()))
        }
    };
    // A window too small for the calibration split is a configuration
    // problem, whatever the pool holds.
    cfg.n_cal(data.n_classes())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.sampling);
    let (idx, _) = sample_kshot(&data.cal, cfg.shots, data.n_classes(), Some(&marginals), &mut rng)?;
    let cal = idx.iter().map(|&i| data.cal[i].clone()).collect();
    Ok(PreparedTrial { seeds, data, cal })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialReport {
    pub trial: usize,
    pub seeds: TrialSeeds,
    pub report: ConformalReport,
    pub windows: usize,
    pub mean_gated_fraction: f64,
}

/// Runs every window of one prepared trial.
pub fn evaluate_trial(
    cfg: &RunConfig,
    prepared: &PreparedTrial<'_>,
    provider: &dyn FailureProvider,
    trial: usize,
) -> Result<TrialReport> {
    let start = Instant::now();
    let data = prepared.data.as_ref();
    let c = data.n_classes();
    let n_cal = cfg.n_cal(c)?;
    let plan = WindowPlan::new(cfg.window, n_cal, data.test.len())?;
    let refine = cfg.refine_config(c);
    refine.validate(c)?;
    let prior = if cfg.beta > 0.0 {
        let labels: Vec<usize> = prepared.cal.iter().map(|e| e.label).collect();
        Some(estimate_prior(&labels, c, cfg.prior_pseudo_count)?)
    } else {
        None
    };
    let settings = WindowSettings {
        bank: &data.bank,
        provider,
        tau: cfg.tau,
        k: cfg.k,
        sigma: cfg.sigma,
        refine,
        prior: prior.as_ref(),
        rule: cfg.score_rule(),
        failure: cfg.failure_params(),
        alpha: cfg.alpha,
    };
    let mut u_rng = ChaCha8Rng::seed_from_u64(prepared.seeds.scoring);
    let mut records = Vec::with_capacity(data.test.len());
    let mut peak = 0;
    let mut gated = 0.0;
    for batch in &plan.test_batches {
        let out = run_window(&prepared.cal, &data.test[batch.clone()], &settings, &mut u_rng)?;
        records.extend(out.records);
        peak = peak.max(out.working_bytes);
        gated += out.gated_fraction;
    }
    if records.is_empty() {
        return Err(LataError::Data("test items carry no labels to evaluate".into()));
    }
    let mut report = ConformalReport::from_records(&records, cfg.alpha, c)?;
    report.wall_time_s = start.elapsed().as_secs_f64();
    report.peak_mem_estimate = peak;
    Ok(TrialReport {
        trial,
        seeds: prepared.seeds,
        report,
        windows: plan.test_batches.len(),
        mean_gated_fraction: gated / plan.test_batches.len().max(1) as f64,
    })
}

pub fn run_trial(
    cfg: &RunConfig,
    source: &DataSource,
    provider: &dyn FailureProvider,
    trial: usize,
) -> Result<TrialReport> {
    let prepared = prepare_trial(cfg, source, trial)?;
    evaluate_trial(cfg, &prepared, provider, trial)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailedTrial {
    pub trial: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: RunConfig,
    pub aggregate: AggregateReport,
    pub trials: Vec<TrialReport>,
    pub failed_trials: Vec<FailedTrial>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingSummary {
    pub total_trial_time_s: f64,
    pub mean_trial_time_s: f64,
    pub time_per_test_item_ms: f64,
}

impl ExperimentReport {
    pub fn timing(&self) -> TimingSummary {
        let total: f64 = self.trials.iter().map(|t| t.report.wall_time_s).sum();
        let items: usize = self.trials.iter().map(|t| t.report.n_test).sum();
        TimingSummary {
            total_trial_time_s: total,
            mean_trial_time_s: total / self.trials.len().max(1) as f64,
            time_per_test_item_ms: 1e3 * total / items.max(1) as f64,
        }
    }
}

/// Runs trials `0..f(trial)` on a pool of `workers` threads (0 = all
/// cores); results come back in trial order.
pub fn parallel_trials<T, F>(workers: usize, trials: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| LataError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| (0..trials).into_par_iter().map(f).collect()))
}

/// Splits trial outcomes into successes and logged failures. Configuration
/// errors, or every trial failing, abort the experiment.
pub fn collect_trials<T>(results: Vec<Result<T>>) -> Result<(Vec<T>, Vec<FailedTrial>)> {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    let mut first_err = None;
    for (trial, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => ok.push(t),
            Err(e @ LataError::Config(_)) => return Err(e),
            Err(e) => {
                log::warn!("trial {trial} aborted: {e}");
                failed.push(FailedTrial {
                    trial,
                    error: e.to_string(),
                });
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) if ok.is_empty() => Err(e),
        _ => Ok((ok, failed)),
    }
}

pub fn run_experiment(
    cfg: &RunConfig,
    source: &DataSource,
    provider: &dyn FailureProvider,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let results = parallel_trials(cfg.workers, cfg.trials, |t| run_trial(cfg, source, provider, t))?;
    let (trials, failed_trials) = collect_trials(results)?;
    let reports: Vec<ConformalReport> = trials.iter().map(|t| t.report.clone()).collect();
    Ok(ExperimentReport {
        config: cfg.clone(),
        aggregate: AggregateReport::from_reports(&reports),
        trials,
        failed_trials,
    })
}

/// Parameters that `ablate` can sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AblationParam {
    Gamma,
    K,
    TIter,
    Beta,
    Lambda,
    Eta,
    Tau,
    Window,
    Shots,
    Kappa,
    GateThreshold,
}

impl std::str::FromStr for AblationParam {
    type Err = LataError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gamma" => Self::Gamma,
            "k" => Self::K,
            "t_iter" => Self::TIter,
            "beta" => Self::Beta,
            "lambda" => Self::Lambda,
            "eta" => Self::Eta,
            "tau" => Self::Tau,
            "W" | "window" => Self::Window,
            "K" | "shots" => Self::Shots,
            "kappa" => Self::Kappa,
            "gate_threshold" => Self::GateThreshold,
            other => return Err(LataError::Config(format!("cannot sweep '{other}'"))),
        })
    }
}

impl AblationParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gamma => "gamma",
            Self::K => "k",
            Self::TIter => "t_iter",
            Self::Beta => "beta",
            Self::Lambda => "lambda",
            Self::Eta => "eta",
            Self::Tau => "tau",
            Self::Window => "W",
            Self::Shots => "K",
            Self::Kappa => "kappa",
            Self::GateThreshold => "gate_threshold",
        }
    }

    /// A copy of `cfg` with this parameter set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: f64) -> Result<RunConfig> {
        let count = || {
            if value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(LataError::Config(format!("{} needs a whole number, got {value}", self.name())))
            }
        };
        let mut c = cfg.clone();
        match self {
            Self::Gamma => c.gamma = value,
            Self::K => c.k = count()?,
            Self::TIter => c.t_iter = count()?,
            Self::Beta => c.beta = value,
            Self::Lambda => c.lambda = value,
            Self::Eta => c.eta = value,
            Self::Tau => c.tau = value,
            Self::Window => c.window = count()?,
            Self::Shots => c.shots = count()?,
            Self::Kappa => c.kappa = Some(count()?),
            Self::GateThreshold => c.gate_threshold = Some(value),
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub param: &'static str,
    pub value: f64,
    pub aggregate: AggregateReport,
    pub failed_trials: usize,
}

/// One experiment per value, all on the same trial seeds.
pub fn run_ablation(
    cfg: &RunConfig,
    source: &DataSource,
    provider: &dyn FailureProvider,
    param: AblationParam,
    values: &[f64],
) -> Result<Vec<AblationRow>> {
    values
        .iter()
        .map(|&v| {
            let report = run_experiment(&param.apply(cfg, v)?, source, provider)?;
            Ok(AblationRow {
                param: param.name(),
                value: v,
                aggregate: report.aggregate,
                failed_trials: report.failed_trials.len(),
            })
        })
        .collect()
}
