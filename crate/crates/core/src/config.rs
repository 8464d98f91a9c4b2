//! Run configuration shared by the library harness and the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conformal::{FailureAwareParams, ScoreKind, ScoreRule};
use crate::error::{LataError, Result};
use crate::harness::synthetic::SyntheticSpec;
use crate::io::DataConfig;
use crate::refine::RefineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Heuristic,
    Vilu,
}

impl std::str::FromStr for ProviderKind {
    type Err = LataError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "heuristic" => Ok(Self::Heuristic),
            "vilu" => Ok(Self::Vilu),
            other => Err(LataError::Config(format!("unknown provider '{other}'"))),
        }
    }
}

/// Every knob of one experiment. Missing JSON fields take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub alpha: f64,
    pub score: ScoreKind,
    pub k_reg: usize,
    pub gamma_raps: f64,
    /// Draw a fresh U per sample for APS/RAPS.
    pub randomize_u: bool,
    pub u_value: f64,

    pub gamma: f64,
    pub t_iter: usize,
    pub k: usize,
    /// Fixed kernel bandwidth; the median neighbor distance when absent.
    pub sigma: Option<f64>,
    pub beta: f64,
    pub prior_pseudo_count: f64,
    /// Top-kappa truncation; values >= C leave rows untouched.
    pub kappa: Option<usize>,
    pub gate_threshold: Option<f64>,
    pub lambda: f64,
    pub eta: f64,
    pub tau: f64,

    pub window: usize,
    pub shots: usize,
    pub trials: usize,
    pub seed: u64,
    /// Worker threads for trials; 0 uses all cores. Not written to reports,
    /// which must not depend on it.
    #[serde(skip_serializing)]
    pub workers: usize,

    pub provider: ProviderKind,
    pub vilu_bundle: Option<PathBuf>,
    pub data: Option<DataConfig>,
    pub synthetic: Option<SyntheticSpec>,
    /// Output directory; left out of reports so they compare across locations.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let score = ScoreRule::default();
        let refine = RefineConfig::default();
        let fa = FailureAwareParams::default();
        Self {
            alpha: 0.1,
            score: score.kind,
            k_reg: score.k_reg,
            gamma_raps: score.gamma_raps,
            randomize_u: score.randomize,
            u_value: score.u_value,
            gamma: refine.gamma,
            t_iter: refine.t_iter,
            k: 15,
            sigma: None,
            beta: refine.beta,
            prior_pseudo_count: 1.0,
            kappa: Some(128),
            gate_threshold: None,
            lambda: fa.lambda,
            eta: fa.eta,
            tau: 1.0,
            window: 256,
            shots: 16,
            trials: 100,
            seed: 0,
            workers: 0,
            provider: ProviderKind::Heuristic,
            vilu_bundle: None,
            data: None,
            synthetic: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LataError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| LataError::Config(format!("{}: {e}", path.display())))
    }

    pub fn score_rule(&self) -> ScoreRule {
        ScoreRule {
            kind: self.score,
            k_reg: self.k_reg,
            gamma_raps: self.gamma_raps,
            randomize: self.randomize_u,
            u_value: self.u_value,
        }
    }

    /// Refinement settings with `kappa` clamped to the class count.
    pub fn refine_config(&self, n_classes: usize) -> RefineConfig {
        RefineConfig {
            gamma: self.gamma,
            t_iter: self.t_iter,
            beta: self.beta,
            kappa: self.kappa.map(|k| k.min(n_classes)),
            gate_threshold: self.gate_threshold,
            track_objective: false,
        }
    }

    pub fn failure_params(&self) -> FailureAwareParams {
        FailureAwareParams {
            lambda: self.lambda,
            eta: self.eta,
        }
    }

    /// Checks ranges that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LataError::Config(msg));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must be in (0, 1), got {}", self.alpha));
        }
        self.score_rule().validate()?;
        self.failure_params().validate()?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("sigma must be positive, got {s}"));
            }
        }
        if !(self.prior_pseudo_count >= 0.0 && self.prior_pseudo_count.is_finite()) {
            return bad(format!("prior pseudo-count must be >= 0, got {}", self.prior_pseudo_count));
        }
        if self.beta > 0.0 && self.prior_pseudo_count == 0.0 {
            return bad("beta > 0 needs a positive prior pseudo-count".into());
        }
        if self.kappa == Some(0) {
            return bad("kappa must be >= 1".into());
        }
        // kappa is clamped to C, so only the lower bound matters here.
        self.refine_config(usize::MAX).validate(usize::MAX)?;
        if self.shots == 0 {
            return bad("shots must be >= 1".into());
        }
        if self.trials == 0 {
            return bad("trials must be >= 1".into());
        }
        if self.window < 2 {
            return bad(format!("window must be >= 2, got {}", self.window));
        }
        if self.provider == ProviderKind::Vilu && self.vilu_bundle.is_none() {
            return bad("provider 'vilu' needs a weight bundle".into());
        }
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) => bad("give either a dataset or a synthetic spec, not both".into()),
            (None, Some(s)) => s.validate(),
            _ => Ok(()),
        }
    }

    /// Calibration size `C * K`; must leave room for test items in a window.
    pub fn n_cal(&self, n_classes: usize) -> Result<usize> {
        let n = n_classes * self.shots;
        if n >= self.window {
            return Err(LataError::Config(format!(
                "window {} must exceed the calibration size {n} (C = {n_classes}, K = {}); raise the window",
                self.window, self.shots
            )));
        }
        Ok(n)
    }
}
