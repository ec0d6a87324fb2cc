//! Threshold selection from validation scores.
//!
//! Given `n` validation log-scores `log f(y_i|x_i)` and a budget `k*`, the
//! smallest threshold whose set misses at most `k*` validation points is
//! `T̂ = -s_(k*+1)` where `s_(1) <= … <= s_(n)` are the sorted scores. When
//! `s_(k*+1)` ties with `s_(k*)`, `k*` is decremented until the scores
//! separate, so the reported miss count is exact.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{alpha_for, BoundKind, BoundsError, Budget, PacParams};
use crate::confset::{confidence_set, ConfidenceSet, ConfsetError, Threshold};
use crate::forecaster::{apply_temperature, fit_temperature, log_prob, Forecast, ForecastError, Label, Temperature};
use crate::trajectory::{calibrate_trajectory, StepCalibrationMode, StepTemperatures, TrajectoryError};

/// Cap applied to `T̂` when it would be `+inf` (the `(k*+1)`-th score is a
/// zero-probability label).
pub const THRESHOLD_CAP: f64 = 700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub id: String,
    pub log_score: f64,
}

impl ScoredExample {
    pub fn new(id: impl Into<String>, log_score: f64) -> Self {
        Self { id: id.into(), log_score }
    }
}

/// `errors` out of `n` examples fell outside their sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCount {
    pub errors: u64,
    pub n: u64,
}

impl ErrorCount {
    pub fn rate(&self) -> f64 {
        self.errors as f64 / self.n as f64
    }

    /// Exact comparison `errors / n <= k* / n_budget`.
    pub fn within(&self, budget: &Budget) -> bool {
        (self.errors as u128) * (budget.n as u128) <= (budget.k_star as u128) * (self.n as u128)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("no validation scores")]
    EmptyScores,

    #[error("score for `{0}` is NaN")]
    DegenerateScores(String),

    #[error("budget was computed for n={budget_n} but {scores} scores were given")]
    BudgetMismatch { budget_n: u64, scores: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    /// Tied scores at the cutoff shrank the effective miss count.
    TiesDecremented { k_star: u64, effective_k: u64 },
    /// Repeated finite scores: the score distribution has atoms, so the
    /// continuity assumption behind the guarantee does not hold exactly.
    RepeatedScores { distinct: usize, n: usize },
    /// The cutoff score was `-inf`; `T̂` was capped and some zero-probability
    /// validation labels remain uncovered.
    ContinuityViolation { infinite_scores: usize, capped_at: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFit {
    pub threshold: Threshold,
    pub effective_k: u64,
    pub diagnostics: Vec<Diagnostic>,
}

/// Fraction of examples with `log_score < -T`.
pub fn empirical_risk(t: Threshold, scores: &[ScoredExample]) -> Result<ErrorCount, EstimatorError> {
    if scores.is_empty() {
        return Err(EstimatorError::EmptyScores);
    }
    let level = t.log_level();
    let errors = scores.iter().filter(|s| s.log_score < level).count() as u64;
    Ok(ErrorCount { errors, n: scores.len() as u64 })
}

/// Cutoff on ascending finite-or-`-inf` scores: returns `(T̂, effective_k)`
/// with `effective_k` the first index of the tie run containing `k`.
pub(crate) fn cutoff_sorted(sorted: &[f64], k_star: usize) -> (f64, usize) {
    let mut k = k_star;
    while k > 0 && !(sorted[k] > sorted[k - 1]) {
        k -= 1;
    }
    (-sorted[k], k)
}

/// Selects `T̂` for the given budget.
pub fn fit_threshold(scores: &[ScoredExample], budget: &Budget) -> Result<ThresholdFit, EstimatorError> {
    if scores.is_empty() {
        return Err(EstimatorError::EmptyScores);
    }
    if budget.n != scores.len() as u64 || budget.k_star >= budget.n {
        return Err(EstimatorError::BudgetMismatch { budget_n: budget.n, scores: scores.len() });
    }
    if let Some(bad) = scores.iter().find(|s| s.log_score.is_nan()) {
        return Err(EstimatorError::DegenerateScores(bad.id.clone()));
    }
    let mut order: Vec<&ScoredExample> = scores.iter().collect();
    order.sort_by(|a, b| a.log_score.total_cmp(&b.log_score).then_with(|| a.id.cmp(&b.id)));
    let sorted: Vec<f64> = order.iter().map(|s| s.log_score).collect();

    let (raw_t, mut effective_k) = cutoff_sorted(&sorted, budget.k_star as usize);
    let mut diagnostics = Vec::new();
    if (effective_k as u64) < budget.k_star {
        diagnostics.push(Diagnostic::TiesDecremented { k_star: budget.k_star, effective_k: effective_k as u64 });
    }
    let finite: Vec<f64> = sorted.iter().copied().filter(|s| s.is_finite()).collect();
    let distinct = 1 + finite.windows(2).filter(|w| w[1] > w[0]).count();
    if !finite.is_empty() && distinct < finite.len() {
        diagnostics.push(Diagnostic::RepeatedScores { distinct, n: sorted.len() });
    }
    let threshold = if raw_t == f64::INFINITY {
        let infinite_scores = sorted.iter().filter(|s| **s == f64::NEG_INFINITY).count();
        diagnostics.push(Diagnostic::ContinuityViolation { infinite_scores, capped_at: THRESHOLD_CAP });
        effective_k = sorted.iter().filter(|s| **s < -THRESHOLD_CAP).count();
        Threshold(THRESHOLD_CAP)
    } else {
        Threshold(raw_t)
    };
    Ok(ThresholdFit { threshold, effective_k: effective_k as u64, diagnostics })
}

/// One labelled input: an id, the model's forecast, and the true output.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub forecast: Forecast,
    pub label: Label,
}

/// How the forecaster is recalibrated before thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CalibrationMode {
    /// `tau = 1` (ablation without calibration).
    None,
    /// One global temperature.
    #[default]
    Global,
    /// Per-step temperatures for trajectory forecasts.
    Steps(StepCalibrationMode),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub bound: BoundKind,
    pub calibration: CalibrationMode,
}

/// Fitted calibration for a forecaster.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Calibration {
    #[default]
    Identity,
    Global(f64),
    Steps(StepTemperatures),
}

impl Calibration {
    pub fn apply(&self, f: &Forecast) -> Result<Forecast, ForecastError> {
        match (self, f) {
            (Calibration::Identity, f) => Ok(f.clone()),
            (Calibration::Global(tau), f) => Ok(apply_temperature(f, &Temperature::global(*tau))),
            (Calibration::Steps(taus), Forecast::Trajectory(tf)) => {
                Ok(Forecast::Trajectory(tf.with_step_temperatures(taus.clone())?))
            }
            (Calibration::Steps(_), f) => Err(ForecastError::KindMismatch(f.kind())),
        }
    }

    pub fn tau(&self) -> Option<f64> {
        match self {
            Calibration::Global(tau) => Some(*tau),
            _ => None,
        }
    }

    pub fn step_tau(&self) -> Option<&StepTemperatures> {
        match self {
            Calibration::Steps(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Bounds(#[from] BoundsError),

    #[error(transparent)]
    Estimator(#[from] EstimatorError),

    #[error(transparent)]
    Forecast(#[from] ForecastError),

    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),

    #[error(transparent)]
    Confset(#[from] ConfsetError),

    #[error("example `{0}` appears in both calibration and validation data")]
    Overlap(String),

    #[error("per-step calibration requires trajectory forecasts")]
    StepsNeedTrajectories,
}

impl PipelineError {
    pub fn is_infeasible(&self) -> bool {
        matches!(self, PipelineError::Bounds(BoundsError::Infeasible { .. }))
    }
}

/// Serialized result of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_tau: Option<StepTemperatures>,
    #[serde(rename = "T_hat")]
    pub t_hat: f64,
    pub k_star: u64,
    pub effective_k: u64,
    pub alpha: f64,
    pub n: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub bound: BoundKind,
    #[serde(default)]
    pub diagnostics: Vec<Diagnostic>,
}

impl Artifact {
    pub fn threshold(&self) -> Threshold {
        Threshold(self.t_hat)
    }

    pub fn calibration(&self) -> Calibration {
        match (&self.step_tau, self.tau) {
            (Some(s), _) => Calibration::Steps(s.clone()),
            (None, Some(tau)) => Calibration::Global(tau),
            (None, None) => Calibration::Identity,
        }
    }

    pub fn calibrated(&self, f: &Forecast) -> Result<Forecast, ForecastError> {
        self.calibration().apply(f)
    }

    pub fn log_score(&self, ex: &Example) -> Result<f64, ForecastError> {
        log_prob(&self.calibrated(&ex.forecast)?, &ex.label)
    }

    pub fn covers(&self, ex: &Example) -> Result<bool, ForecastError> {
        Ok(self.log_score(ex)? >= self.threshold().log_level())
    }

    pub fn confidence_set(&self, f: &Forecast) -> Result<ConfidenceSet, PipelineError> {
        Ok(confidence_set(&self.calibrated(f)?, self.threshold())?)
    }
}

/// Fits the calibration requested by `mode` on `calibration`.
pub fn fit_calibration(calibration: &[Example], mode: CalibrationMode) -> Result<Calibration, PipelineError> {
    match mode {
        CalibrationMode::None => Ok(Calibration::Identity),
        CalibrationMode::Global => {
            let pairs: Vec<(Forecast, Label)> =
                calibration.iter().map(|e| (e.forecast.clone(), e.label.clone())).collect();
            Ok(Calibration::Global(fit_temperature(&pairs)?.tau))
        }
        CalibrationMode::Steps(step_mode) => {
            let mut rollouts = Vec::with_capacity(calibration.len());
            for e in calibration {
                match (&e.forecast, &e.label) {
                    (Forecast::Trajectory(tf), Label::Trajectory(xs)) => rollouts.push((tf.clone(), xs.clone())),
                    _ => return Err(PipelineError::StepsNeedTrajectories),
                }
            }
            Ok(Calibration::Steps(calibrate_trajectory(&rollouts, step_mode)?))
        }
    }
}

/// Calibrate, compute the budget, and select `T̂`.
pub fn end_to_end(
    calibration: &[Example],
    validation: &[Example],
    config: &PipelineConfig,
) -> Result<Artifact, PipelineError> {
    let cal_ids: HashSet<&str> = calibration.iter().map(|e| e.id.as_str()).collect();
    if let Some(dup) = validation.iter().find(|e| cal_ids.contains(e.id.as_str())) {
        return Err(PipelineError::Overlap(dup.id.clone()));
    }
    if validation.is_empty() {
        return Err(EstimatorError::EmptyScores.into());
    }
    let params = PacParams::new(config.epsilon, config.delta, validation.len() as u64)?;
    // infeasibility is independent of the data, so check it before fitting tau
    let budget = alpha_for(&params, config.bound)?;
    let cal = fit_calibration(calibration, config.calibration)?;
    fit_artifact(&cal, &budget, validation, config)
}

/// Scores `validation` under an already fitted calibration and selects `T̂`
/// for `budget`.
pub fn fit_artifact(
    cal: &Calibration,
    budget: &Budget,
    validation: &[Example],
    config: &PipelineConfig,
) -> Result<Artifact, PipelineError> {
    if budget.n != validation.len() as u64 {
        return Err(EstimatorError::BudgetMismatch { budget_n: budget.n, scores: validation.len() }.into());
    }
    let scores = validation
        .iter()
        .map(|e| Ok(ScoredExample::new(e.id.clone(), log_prob(&cal.apply(&e.forecast)?, &e.label)?)))
        .collect::<Result<Vec<_>, ForecastError>>()?;
    let fit = fit_threshold(&scores, budget)?;
    Ok(Artifact {
        tau: cal.tau(),
        step_tau: cal.step_tau().cloned(),
        t_hat: fit.threshold.0,
        k_star: budget.k_star,
        effective_k: fit.effective_k,
        alpha: budget.alpha(),
        n: budget.n,
        epsilon: config.epsilon,
        delta: config.delta,
        bound: config.bound,
        diagnostics: fit.diagnostics,
    })
}
