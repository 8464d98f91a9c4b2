//! Transductive refinement of zero-shot probabilities over the pool graph.
//!
//! The update is the mean-field / CCCP step
//! `z_ik <- q_ik * exp(gamma * sum_j W_ij z_jk)` followed by row
//! normalization, applied synchronously to every row for a fixed number of
//! iterations. Labels never enter this module.

use serde::{Deserialize, Serialize};

use crate::error::{LataError, Result};
use crate::graph::{laplacian_quadratic, SparseAffinityGraph};
use crate::matrix::{dot, Matrix};
use crate::model::ProbabilityVector;

/// Floor applied to positive `q` entries before taking logs.
const Q_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    /// Graph-smoothness weight.
    pub gamma: f64,
    /// Number of synchronous updates; no early stopping.
    pub t_iter: usize,
    /// Prior strength in [0, 1]; 0 disables the prior.
    pub beta: f64,
    /// Keep only the top-kappa classes per row during refinement.
    pub kappa: Option<usize>,
    /// Rows with failure probability below this value are not refined.
    pub gate_threshold: Option<f64>,
    /// Record the objective after every iteration (one extra pass each).
    #[serde(default)]
    pub track_objective: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            gamma: 0.35,
            t_iter: 8,
            beta: 0.0,
            kappa: None,
            gate_threshold: None,
            track_objective: false,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(LataError::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(LataError::Config(format!("beta must be in [0, 1], got {}", self.beta)));
        }
        if let Some(k) = self.kappa {
            if k < 1 || k > n_classes {
                return Err(LataError::Config(format!(
                    "kappa must be in [1, {n_classes}], got {k}"
                )));
            }
        }
        if let Some(t) = self.gate_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(LataError::Config(format!(
                    "gate threshold must be in [0, 1], got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Class-frequency prior estimated once from calibration labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassPrior {
    pub m: ProbabilityVector,
    pub smoothing: f64,
}

impl ClassPrior {
    pub fn is_strictly_positive(&self) -> bool {
        self.m.as_slice().iter().all(|&x| x > 0.0)
    }
}

/// Dirichlet-smoothed label marginals: `(count_k + a) / (n + C a)`.
///
/// Zero entries are possible when `pseudo_count == 0`; [`apply_prior`]
/// rejects such priors for `beta > 0`.
pub fn estimate_prior(labels: &[usize], n_classes: usize, pseudo_count: f64) -> Result<ClassPrior> {
    if labels.is_empty() {
        return Err(LataError::InvalidInput("no calibration labels for prior".into()));
    }
    if !(pseudo_count >= 0.0 && pseudo_count.is_finite()) {
        return Err(LataError::InvalidInput(format!(
            "pseudo-count must be >= 0, got {pseudo_count}"
        )));
    }
    let mut counts = vec![0.0; n_classes];
    for &y in labels {
        if y >= n_classes {
            return Err(LataError::InvalidInput(format!(
                "label {y} out of range for {n_classes} classes"
            )));
        }
        counts[y] += 1.0;
    }
    let denom = labels.len() as f64 + n_classes as f64 * pseudo_count;
    let m = counts.iter().map(|c| (c + pseudo_count) / denom).collect();
    Ok(ClassPrior {
        m: ProbabilityVector::new(m)?,
        smoothing: pseudo_count,
    })
}

/// Reweights every row by `m^beta` and renormalizes.
///
/// The same transform is applied to calibration and test rows. `beta == 0`
/// returns the input unchanged.
pub fn apply_prior(q: &Matrix, prior: &ClassPrior, beta: f64) -> Result<Matrix> {
    if q.cols() != prior.m.len() {
        return Err(LataError::dims("prior classes", q.cols(), prior.m.len()));
    }
    if beta == 0.0 {
        return Ok(q.clone());
    }
    if !prior.is_strictly_positive() {
        return Err(LataError::InvalidInput(
            "prior has non-positive entries; use a positive pseudo-count with beta > 0".into(),
        ));
    }
    let weights: Vec<f64> = prior.m.as_slice().iter().map(|m| m.powf(beta)).collect();
    let mut out = q.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mut sum = 0.0;
        for (x, w) in row.iter_mut().zip(&weights) {
            *x *= w;
            sum += *x;
        }
        row.iter_mut().for_each(|x| *x /= sum);
    }
    Ok(out)
}

fn kl_rows(z: &Matrix, q: &Matrix) -> f64 {
    let mut total = 0.0;
    for (zr, qr) in z.iter_rows().zip(q.iter_rows()) {
        for (&zi, &qi) in zr.iter().zip(qr) {
            if zi > 0.0 {
                if qi <= 0.0 {
                    return f64::INFINITY;
                }
                total += zi * (zi / qi.max(Q_FLOOR)).ln();
            }
        }
    }
    total
}

fn check_pair(z: &Matrix, q: &Matrix, graph: &SparseAffinityGraph) -> Result<()> {
    if z.rows() != q.rows() {
        return Err(LataError::dims("objective rows", q.rows(), z.rows()));
    }
    if z.cols() != q.cols() {
        return Err(LataError::dims("objective classes", q.cols(), z.cols()));
    }
    if graph.n_nodes() != z.rows() {
        return Err(LataError::dims("graph nodes", z.rows(), graph.n_nodes()));
    }
    Ok(())
}

/// `sum_i KL(z_i || q_i) + gamma/2 sum_ij W_ij |z_i - z_j|^2`.
///
/// Returns `+inf` when some `z_ik > 0` has `q_ik = 0`.
pub fn objective(z: &Matrix, q: &Matrix, graph: &SparseAffinityGraph, gamma: f64) -> Result<f64> {
    check_pair(z, q, graph)?;
    Ok(kl_rows(z, q) + gamma * laplacian_quadratic(graph, z))
}

/// `sum_i KL(z_i || q_i) - gamma/2 sum_ij W_ij z_i.z_j`.
///
/// This is the free energy whose linearized concave part yields exactly the
/// multiplicative update used by [`refine`].
pub fn mean_field_energy(
    z: &Matrix,
    q: &Matrix,
    graph: &SparseAffinityGraph,
    gamma: f64,
) -> Result<f64> {
    check_pair(z, q, graph)?;
    let coupling: f64 = (0..graph.n_nodes())
        .map(|i| {
            graph
                .neighbors(i)
                .map(|(j, w)| w * dot(z.row(i), z.row(j)))
                .sum::<f64>()
        })
        .sum();
    Ok(kl_rows(z, q) - 0.5 * gamma * coupling)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineTrace {
    /// Objective at iterations 0..=t_iter (empty unless tracking is on).
    pub objective_values: Vec<f64>,
    /// Mean-field energy at the same iterations (empty unless tracking is on).
    pub energy_values: Vec<f64>,
    pub iterations_run: usize,
    /// Share of rows kept at their input values by u-gating.
    pub gated_fraction: f64,
}

fn validate_rows(q: &Matrix) -> Result<()> {
    for (i, row) in q.iter_rows().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(LataError::InvalidInput(format!(
                "row {i} is not a probability vector"
            )));
        }
    }
    Ok(())
}

/// Runs `config.t_iter` synchronous mean-field updates starting from `q`.
///
/// When gating is enabled, rows with `u < gate_threshold` stay at `q` but
/// still feed their neighbors' aggregates. Prior and top-kappa handling live
/// in [`apply_prior`] and [`truncate_topk`].
pub fn refine(
    q: &Matrix,
    graph: &SparseAffinityGraph,
    config: &RefineConfig,
    u: Option<&[f64]>,
) -> Result<(Matrix, RefineTrace)> {
    let (n, c) = (q.rows(), q.cols());
    if graph.n_nodes() != n {
        return Err(LataError::dims("graph nodes", n, graph.n_nodes()));
    }
    if !(config.gamma >= 0.0 && config.gamma.is_finite()) {
        return Err(LataError::Config(format!("gamma must be >= 0, got {}", config.gamma)));
    }
    validate_rows(q)?;

    let frozen: Vec<bool> = match (config.gate_threshold, u) {
        (None, _) => vec![false; n],
        (Some(t), Some(u)) => {
            if u.len() != n {
                return Err(LataError::dims("failure signals", n, u.len()));
            }
            u.iter().map(|&ui| ui < t).collect()
        }
        (Some(_), None) => {
            return Err(LataError::InvalidInput(
                "gating enabled but no failure probabilities supplied".into(),
            ))
        }
    };
    let gated = frozen.iter().filter(|&&f| f).count();

    let mut trace = RefineTrace {
        objective_values: Vec::new(),
        energy_values: Vec::new(),
        iterations_run: 0,
        gated_fraction: if n == 0 { 0.0 } else { gated as f64 / n as f64 },
    };
    let record = |z: &Matrix, trace: &mut RefineTrace| -> Result<()> {
        if config.track_objective {
            trace.objective_values.push(objective(z, q, graph, config.gamma)?);
            trace.energy_values.push(mean_field_energy(z, q, graph, config.gamma)?);
        }
        Ok(())
    };

    let mut current = q.clone();
    record(&current, &mut trace)?;
    if config.gamma == 0.0 {
        // exp(0) = 1: every iterate equals q exactly.
        for _ in 0..config.t_iter {
            record(&current, &mut trace)?;
        }
        trace.iterations_run = config.t_iter;
        return Ok((current, trace));
    }

    let mut next = Matrix::zeros(n, c);
    let mut agg = vec![0.0; c];
    for t in 1..=config.t_iter {
        for i in 0..n {
            let qi = q.row(i);
            if frozen[i] || graph.degree(i) == 0.0 {
                next.row_mut(i).copy_from_slice(qi);
                continue;
            }
            graph.aggregate_row(i, &current, &mut agg);
            let shift = qi
                .iter()
                .zip(&agg)
                .filter(|(&qk, _)| qk > 0.0)
                .map(|(_, &a)| config.gamma * a)
                .fold(f64::NEG_INFINITY, f64::max);
            let out = next.row_mut(i);
            let mut sum = 0.0;
            for ((o, &qk), &a) in out.iter_mut().zip(qi).zip(&agg) {
                *o = if qk > 0.0 {
                    qk * (config.gamma * a - shift).exp()
                } else {
                    0.0
                };
                sum += *o;
            }
            if !(sum.is_finite() && sum > 0.0) {
                return Err(LataError::Numerical {
                    iteration: t,
                    detail: format!("row {i} normalizer is {sum}"),
                });
            }
            out.iter_mut().for_each(|o| *o /= sum);
            if out.iter().any(|o| o.is_nan()) {
                return Err(LataError::Numerical {
                    iteration: t,
                    detail: format!("NaN in row {i}"),
                });
            }
        }
        std::mem::swap(&mut current, &mut next);
        trace.iterations_run = t;
        record(&current, &mut trace)?;
    }
    Ok((current, trace))
}

/// Indices kept per row by [`truncate_topk`], ascending.
pub type SupportMask = Vec<usize>;

/// Keeps the `kappa` largest entries per row (lower index wins ties) and
/// renormalizes within that support. `kappa == C` is the identity.
pub fn truncate_topk(q: &Matrix, kappa: usize) -> Result<(Matrix, Vec<SupportMask>)> {
    let c = q.cols();
    if kappa < 1 {
        return Err(LataError::InvalidInput("kappa must be >= 1".into()));
    }
    if kappa > c {
        return Err(LataError::InvalidInput(format!(
            "kappa {kappa} exceeds class count {c}"
        )));
    }
    if kappa == c {
        return Ok((q.clone(), vec![(0..c).collect(); q.rows()]));
    }
    let mut out = Matrix::zeros(q.rows(), c);
    let mut masks = Vec::with_capacity(q.rows());
    let mut order: Vec<usize> = Vec::with_capacity(c);
    for i in 0..q.rows() {
        let row = q.row(i);
        order.clear();
        order.extend(0..c);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut kept: Vec<usize> = order[..kappa].to_vec();
        kept.sort_unstable();
        let mass: f64 = kept.iter().map(|&k| row[k]).sum();
        let dst = out.row_mut(i);
        for &k in &kept {
            dst[k] = row[k] / mass;
        }
        masks.push(kept);
    }
    Ok((out, masks))
}

/// Expands refined top-kappa rows back to all classes.
///
/// On-support values are rescaled to the original on-support mass of `q`,
/// off-support classes keep their original `q`, then the row is renormalized.
pub fn restore_topk(refined: &Matrix, original: &Matrix, masks: &[SupportMask]) -> Result<Matrix> {
    if refined.rows() != original.rows() || refined.cols() != original.cols() {
        return Err(LataError::dims("restore shape", original.rows(), refined.rows()));
    }
    if masks.len() != original.rows() {
        return Err(LataError::dims("support masks", original.rows(), masks.len()));
    }
    let c = original.cols();
    let mut out = original.clone();
    for (i, mask) in masks.iter().enumerate() {
        if mask.len() == c {
            out.row_mut(i).copy_from_slice(refined.row(i));
            continue;
        }
        let q = original.row(i);
        let kept_mass: f64 = mask.iter().map(|&k| q[k]).sum();
        let z = refined.row(i);
        let row = out.row_mut(i);
        for &k in mask {
            row[k] = z[k] * kept_mass;
        }
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= sum);
    }
    Ok(out)
}
