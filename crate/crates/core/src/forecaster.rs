//! Probability forecasters and temperature scaling.
//!
//! A forecast is either a categorical distribution over labels, a
//! multivariate Gaussian, or a multi-step trajectory of Gaussians. The
//! calibrated family is `f_tau(y|x) ∝ exp(tau · log f(y|x))`: for categorical
//! forecasts that is the renormalized power `f^tau`, for Gaussians it is
//! `N(mu, Sigma / tau)`. Under this convention `tau < 1` flattens.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::TrajectoryForecast;

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
pub const TAU_MIN: f64 = 1e-4;
pub const TAU_MAX: f64 = 1e4;
/// Log-probabilities are clamped here while fitting `tau` so the likelihood
/// stays finite when a true label had probability zero.
pub const LOG_PROB_FLOOR: f64 = -700.0;

const NORMALIZATION_TOL: f64 = 1e-8;
const SYMMETRY_TOL: f64 = 1e-10;
const GOLDEN_MAX_ITER: usize = 200;
const GOLDEN_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ForecastError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { label: usize, num_labels: usize },

    #[error("label kind does not match forecast kind ({0})")]
    KindMismatch(&'static str),

    #[error("invalid forecast: {0}")]
    Invalid(String),

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("likelihood is non-finite for every candidate temperature")]
    AllInfinite,
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Natural-log probabilities over `Y >= 2` labels. `-inf` marks a label with
/// zero probability.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalForecast {
    log_probs: Vec<f64>,
}

impl CategoricalForecast {
    pub fn new(log_probs: Vec<f64>) -> Result<Self, ForecastError> {
        if log_probs.len() < 2 {
            return Err(ForecastError::Invalid(format!(
                "categorical forecast needs at least 2 labels, got {}",
                log_probs.len()
            )));
        }
        if log_probs.iter().any(|v| v.is_nan() || *v == f64::INFINITY || *v > 1e-12) {
            return Err(ForecastError::Invalid("log-probabilities must be <= 0".into()));
        }
        let lse = log_sum_exp(&log_probs);
        if !lse.is_finite() {
            return Err(ForecastError::Invalid("every label has zero probability".into()));
        }
        if lse.abs() > NORMALIZATION_TOL {
            return Err(ForecastError::Invalid(format!(
                "log-probabilities are not normalized (log-sum-exp = {lse:e})"
            )));
        }
        Ok(Self { log_probs })
    }

    pub fn from_probs(probs: &[f64]) -> Result<Self, ForecastError> {
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(ForecastError::Invalid("probabilities must be nonnegative".into()));
        }
        Self::new(probs.iter().map(|p| p.ln()).collect())
    }

    /// Renormalizes arbitrary (finite or `-inf`) log-weights.
    pub fn from_log_weights(mut weights: Vec<f64>) -> Result<Self, ForecastError> {
        let lse = log_sum_exp(&weights);
        if !lse.is_finite() {
            return Err(ForecastError::Invalid("weights do not normalize".into()));
        }
        for w in &mut weights {
            *w -= lse;
        }
        Self::new(weights)
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn num_labels(&self) -> usize {
        self.log_probs.len()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|v| v.exp()).collect()
    }

    pub fn log_prob(&self, label: usize) -> Result<f64, ForecastError> {
        self.log_probs.get(label).copied().ok_or(ForecastError::LabelOutOfRange {
            label,
            num_labels: self.log_probs.len(),
        })
    }

    /// Most probable label, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.log_probs.iter().enumerate() {
            if *v > self.log_probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn with_temperature(&self, tau: f64) -> Self {
        let scaled: Vec<f64> = self.log_probs.iter().map(|v| tau * v).collect();
        let lse = log_sum_exp(&scaled);
        Self { log_probs: scaled.into_iter().map(|v| v - lse).collect() }
    }
}

/// `N(mean, cov)` with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianForecast {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl PartialEq for GaussianForecast {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov
    }
}

impl GaussianForecast {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, ForecastError> {
        let d = mean.len();
        if d == 0 {
            return Err(ForecastError::Invalid("Gaussian forecast needs dimension >= 1".into()));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(ForecastError::DimensionMismatch { expected: d, got: cov.nrows() });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(ForecastError::Invalid("non-finite mean or covariance entry".into()));
        }
        let scale = cov.amax().max(1.0);
        for i in 0..d {
            for j in (i + 1)..d {
                if (cov[(i, j)] - cov[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(ForecastError::Invalid(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| ForecastError::Invalid("covariance is not positive definite".into()))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self { mean, cov, chol, log_det })
    }

    /// Clamps the covariance spectrum from below at `floor` before building.
    pub fn new_floored(
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        floor: f64,
    ) -> Result<Self, ForecastError> {
        let sym = (&cov + cov.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let clamped = eig.eigenvalues.map(|v| v.max(floor));
        let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
        let rebuilt = (&rebuilt + rebuilt.transpose()) * 0.5;
        Self::new(mean, rebuilt)
    }

    pub fn univariate(mean: f64, sigma: f64) -> Result<Self, ForecastError> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, sigma * sigma))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Lower-triangular Cholesky factor `L` with `L L^T = cov`.
    pub fn chol_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `(y - mu)^T Sigma^{-1} (y - mu)`.
    pub fn mahalanobis_sq(&self, y: &DVector<f64>) -> Result<f64, ForecastError> {
        if y.len() != self.dim() {
            return Err(ForecastError::DimensionMismatch { expected: self.dim(), got: y.len() });
        }
        let diff = y - &self.mean;
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        Ok(z.norm_squared())
    }

    /// `d ln 2π + ln det Σ`, the constant part of `-2 log N`.
    pub fn log_norm_const(&self) -> f64 {
        self.dim() as f64 * LN_2PI + self.log_det
    }

    pub fn log_density(&self, y: &DVector<f64>) -> Result<f64, ForecastError> {
        let m2 = self.mahalanobis_sq(y)?;
        Ok(-0.5 * (m2 + self.log_norm_const()))
    }

    /// `N(mu, Sigma / tau)`.
    pub fn with_temperature(&self, tau: f64) -> Self {
        let cov = &self.cov / tau;
        let l = self.chol.l() / tau.sqrt();
        Self {
            mean: self.mean.clone(),
            cov,
            chol: Cholesky::pack_dirty(l),
            log_det: self.log_det - self.dim() as f64 * tau.ln(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Forecast {
    Categorical(CategoricalForecast),
    Gaussian(GaussianForecast),
    Trajectory(TrajectoryForecast),
}

impl Forecast {
    pub fn kind(&self) -> &'static str {
        match self {
            Forecast::Categorical(_) => "categorical",
            Forecast::Gaussian(_) => "gaussian",
            Forecast::Trajectory(_) => "trajectory",
        }
    }
}

/// A true (or candidate) output: class index, real vector, or trajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Class(usize),
    Vector(DVector<f64>),
    Trajectory(Vec<DVector<f64>>),
}

/// Natural-log probability (categorical) or log-density of `y`.
pub fn log_prob(f: &Forecast, y: &Label) -> Result<f64, ForecastError> {
    match (f, y) {
        (Forecast::Categorical(c), Label::Class(k)) => c.log_prob(*k),
        (Forecast::Gaussian(g), Label::Vector(v)) => g.log_density(v),
        (Forecast::Trajectory(t), Label::Trajectory(xs)) => t.log_score(xs),
        (f, _) => Err(ForecastError::KindMismatch(f.kind())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemperatureScope {
    Global,
    PerComponent(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub tau: f64,
    pub scope: TemperatureScope,
}

impl Temperature {
    pub fn global(tau: f64) -> Self {
        Self { tau, scope: TemperatureScope::Global }
    }
}

/// Applies a global temperature. Per-component temperatures for
/// trajectories live in [`crate::trajectory::StepTemperatures`].
pub fn apply_temperature(f: &Forecast, t: &Temperature) -> Forecast {
    match f {
        Forecast::Categorical(c) => Forecast::Categorical(c.with_temperature(t.tau)),
        Forecast::Gaussian(g) => Forecast::Gaussian(g.with_temperature(t.tau)),
        Forecast::Trajectory(tr) => Forecast::Trajectory(tr.with_global_temperature(t.tau)),
    }
}

/// One summand of the calibration negative log-likelihood, reduced to what
/// depends on `tau`.
#[derive(Debug, Clone)]
pub(crate) enum NllTerm {
    Categorical { log_probs: Vec<f64>, label: usize },
    /// `tau m2 / 2 + (d ln 2π + ln det Σ)/2 - (d/2) ln tau`
    Gaussian { mahal_sq: f64, dim: f64, log_norm: f64 },
}

impl NllTerm {
    pub(crate) fn categorical(c: &CategoricalForecast, label: usize) -> Result<Self, ForecastError> {
        c.log_prob(label)?;
        Ok(NllTerm::Categorical {
            log_probs: c.log_probs().iter().map(|v| v.max(LOG_PROB_FLOOR)).collect(),
            label,
        })
    }

    pub(crate) fn gaussian(g: &GaussianForecast, y: &DVector<f64>) -> Result<Self, ForecastError> {
        Ok(NllTerm::Gaussian {
            mahal_sq: g.mahalanobis_sq(y)?,
            dim: g.dim() as f64,
            log_norm: g.log_norm_const(),
        })
    }

    fn eval(&self, tau: f64, scratch: &mut Vec<f64>) -> f64 {
        match self {
            NllTerm::Categorical { log_probs, label } => {
                // -log f_tau(y) = ln sum_j exp(tau (l_j - l_y)); ln_1p keeps the
                // tail exact when y is the mode and tau is large
                let ly = log_probs[*label];
                scratch.clear();
                scratch.extend(
                    log_probs.iter().enumerate().filter(|(j, _)| j != label).map(|(_, v)| tau * (v - ly)),
                );
                let top = scratch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if top <= 0.0 {
                    scratch.iter().map(|d| d.exp()).sum::<f64>().ln_1p()
                } else {
                    top + ((-top).exp() + scratch.iter().map(|d| (d - top).exp()).sum::<f64>()).ln()
                }
            }
            NllTerm::Gaussian { mahal_sq, dim, log_norm } => {
                0.5 * (tau * mahal_sq + log_norm - dim * tau.ln())
            }
        }
    }
}

pub(crate) fn nll_terms(calibration: &[(Forecast, Label)]) -> Result<Vec<NllTerm>, ForecastError> {
    let mut terms = Vec::with_capacity(calibration.len());
    for (f, y) in calibration {
        match (f, y) {
            (Forecast::Categorical(c), Label::Class(k)) => terms.push(NllTerm::categorical(c, *k)?),
            (Forecast::Gaussian(g), Label::Vector(v)) => terms.push(NllTerm::gaussian(g, v)?),
            (Forecast::Trajectory(tr), Label::Trajectory(xs)) => {
                // the block-diagonal joint shares one tau across steps
                for (g, x) in tr.step_gaussians()?.iter().zip(xs.iter()) {
                    terms.push(NllTerm::gaussian(g, x)?);
                }
                if xs.len() != tr.horizon() {
                    return Err(ForecastError::DimensionMismatch {
                        expected: tr.horizon(),
                        got: xs.len(),
                    });
                }
            }
            (f, _) => return Err(ForecastError::KindMismatch(f.kind())),
        }
    }
    Ok(terms)
}

pub(crate) fn total_nll(terms: &[NllTerm], tau: f64) -> f64 {
    let mut scratch = Vec::new();
    terms.iter().map(|t| t.eval(tau, &mut scratch)).sum()
}

/// Minimizes the calibration NLL over `tau ∈ [TAU_MIN, TAU_MAX]` with a
/// golden-section search on `ln tau`.
pub(crate) fn fit_tau(terms: &[NllTerm]) -> Result<f64, ForecastError> {
    if terms.is_empty() {
        return Err(ForecastError::EmptyCalibration);
    }
    let objective = |log_tau: f64| {
        let v = total_nll(terms, log_tau.exp());
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (TAU_MIN.ln(), TAU_MAX.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    for _ in 0..GOLDEN_MAX_ITER {
        if b - a < GOLDEN_TOL {
            break;
        }
        // on ties keep the upper bracket so flat tails resolve toward TAU_MAX
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d);
        }
    }
    let interior = (0.5 * (a + b)).exp();
    let mut best = (f64::INFINITY, f64::NAN);
    for tau in [TAU_MIN, 1.0, interior, TAU_MAX] {
        let v = objective(tau.ln());
        if v <= best.0 {
            best = (v, tau);
        }
    }
    if !best.0.is_finite() {
        return Err(ForecastError::AllInfinite);
    }
    Ok(best.1)
}

/// Maximum-likelihood global temperature on a calibration split.
pub fn fit_temperature(calibration: &[(Forecast, Label)]) -> Result<Temperature, ForecastError> {
    let terms = nll_terms(calibration)?;
    Ok(Temperature::global(fit_tau(&terms)?))
}

/// Calibration negative log-likelihood at a given temperature (with the
/// same log-probability floor the fit uses).
pub fn calibration_nll(calibration: &[(Forecast, Label)], tau: f64) -> Result<f64, ForecastError> {
    Ok(total_nll(&nll_terms(calibration)?, tau))
}
