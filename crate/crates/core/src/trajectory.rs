//! Multi-step trajectory forecasts built from a one-step Gaussian dynamics
//! model.
//!
//! The mean trajectory follows the model's mean map, `x̄_{t+1} = μ(x̄_t)`,
//! and step covariances accumulate along it,
//! `Σ̃_t = Σ(x̄_0) + … + Σ(x̄_{t-1})`. The joint forecast over `x_{1:H}` is
//! the block-diagonal Gaussian with blocks `Σ̃_t`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confset::{self, ConfsetError, EllipsoidSet, Threshold};
use crate::forecaster::{fit_tau, ForecastError, GaussianForecast, NllTerm, LN_2PI};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajectoryError {
    #[error(transparent)]
    Forecast(#[from] ForecastError),

    #[error("horizon must be at least 1")]
    ZeroHorizon,

    #[error("no tabulated record for state {0:?}")]
    MissingRecord(Vec<f64>),

    #[error("need at least 2 calibration rollouts, got {0}")]
    TooFewRollouts(usize),

    #[error("model error: {0}")]
    Model(String),
}

/// One-step map `x ↦ (μ(x), Σ(x))`.
pub trait DynamicsModel: Sync {
    fn dim(&self) -> usize;
    fn step(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), TrajectoryError>;
}

/// `x' ~ N(A x + b, Q)`. `Q` only needs to be positive semidefinite for
/// sampling; forecasts built from it must still end up SPD.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussian {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub q: DMatrix<f64>,
}

impl LinearGaussian {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, q: DMatrix<f64>) -> Result<Self, TrajectoryError> {
        let d = b.len();
        if a.shape() != (d, d) || q.shape() != (d, d) {
            return Err(TrajectoryError::Model(format!(
                "shape mismatch: A {:?}, b {d}, Q {:?}",
                a.shape(),
                q.shape()
            )));
        }
        Ok(Self { a, b, q })
    }

    /// `x' = x + N(0, q·I)`.
    pub fn identity(d: usize, q: f64) -> Self {
        Self {
            a: DMatrix::identity(d, d),
            b: DVector::zeros(d),
            q: DMatrix::identity(d, d) * q,
        }
    }
}

impl DynamicsModel for LinearGaussian {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn step(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), TrajectoryError> {
        if x.len() != self.dim() {
            return Err(ForecastError::DimensionMismatch { expected: self.dim(), got: x.len() }.into());
        }
        Ok((&self.a * x + &self.b, self.q.clone()))
    }
}

/// Lookup table of `(x, μ(x), Σ(x))` records, e.g. dumped from a learned
/// model. Queries must match a stored state to within `1e-9` per coordinate.
#[derive(Debug, Clone, Default)]
pub struct TabulatedModel {
    dim: usize,
    records: Vec<(DVector<f64>, DVector<f64>, DMatrix<f64>)>,
}

impl TabulatedModel {
    pub fn new(dim: usize) -> Self {
        Self { dim, records: Vec::new() }
    }

    pub fn insert(
        &mut self,
        x: DVector<f64>,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    ) -> Result<(), TrajectoryError> {
        if x.len() != self.dim || mean.len() != self.dim || cov.shape() != (self.dim, self.dim) {
            return Err(TrajectoryError::Model("record shape does not match model dimension".into()));
        }
        self.records.push((x, mean, cov));
        Ok(())
    }
}

impl DynamicsModel for TabulatedModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn step(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), TrajectoryError> {
        self.records
            .iter()
            .find(|(key, _, _)| key.len() == x.len() && (key - x).amax() <= 1e-9)
            .map(|(_, m, c)| (m.clone(), c.clone()))
            .ok_or_else(|| TrajectoryError::MissingRecord(x.iter().copied().collect()))
    }
}

/// Per-component temperatures for a trajectory forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepTemperatures {
    /// One `tau_t` per step: block `t` becomes `Σ̃_t / tau_t`.
    PerStep(Vec<f64>),
    /// One `tau_{t,j}` per step and coordinate: block `t` becomes
    /// `D^{-1/2} Σ̃_t D^{-1/2}` with `D = diag(tau_{t,·})`.
    PerStepDim(Vec<Vec<f64>>),
}

impl StepTemperatures {
    pub fn horizon(&self) -> usize {
        match self {
            StepTemperatures::PerStep(v) => v.len(),
            StepTemperatures::PerStepDim(v) => v.len(),
        }
    }

    fn scale(&self, factor: f64) -> Self {
        match self {
            StepTemperatures::PerStep(v) => StepTemperatures::PerStep(v.iter().map(|t| t * factor).collect()),
            StepTemperatures::PerStepDim(v) => StepTemperatures::PerStepDim(
                v.iter().map(|row| row.iter().map(|t| t * factor).collect()).collect(),
            ),
        }
    }

    fn apply(&self, t: usize, cov: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            StepTemperatures::PerStep(v) => cov / v[t],
            StepTemperatures::PerStepDim(v) => {
                let taus = &v[t];
                DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| cov[(i, j)] / (taus[i] * taus[j]).sqrt())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepCalibrationMode {
    PerStep,
    PerStepDim,
}

/// How step covariances are formed during rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceMode {
    /// `Σ̃_t = Σ_{s<t} Σ(x̄_s)`.
    #[default]
    Accumulated,
    /// `Σ_t = Σ(x̄_{t-1})` only (the "no accumulation" ablation).
    OneStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryForecast {
    means: Vec<DVector<f64>>,
    step_covs: Vec<DMatrix<f64>>,
    step_tau: Option<StepTemperatures>,
}

impl TrajectoryForecast {
    pub fn new(means: Vec<DVector<f64>>, step_covs: Vec<DMatrix<f64>>) -> Result<Self, ForecastError> {
        if means.is_empty() {
            return Err(ForecastError::Invalid("trajectory horizon must be at least 1".into()));
        }
        if means.len() != step_covs.len() {
            return Err(ForecastError::DimensionMismatch { expected: means.len(), got: step_covs.len() });
        }
        let d = means[0].len();
        if d == 0 {
            return Err(ForecastError::Invalid("trajectory state dimension must be at least 1".into()));
        }
        for (m, c) in means.iter().zip(&step_covs) {
            if m.len() != d {
                return Err(ForecastError::DimensionMismatch { expected: d, got: m.len() });
            }
            if c.shape() != (d, d) {
                return Err(ForecastError::DimensionMismatch { expected: d, got: c.nrows() });
            }
        }
        Ok(Self { means, step_covs, step_tau: None })
    }

    pub fn horizon(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    /// Uncalibrated step covariances `Σ̃_t`.
    pub fn step_covs(&self) -> &[DMatrix<f64>] {
        &self.step_covs
    }

    pub fn step_tau(&self) -> Option<&StepTemperatures> {
        self.step_tau.as_ref()
    }

    pub fn with_step_temperatures(&self, taus: StepTemperatures) -> Result<Self, ForecastError> {
        if taus.horizon() != self.horizon() {
            return Err(ForecastError::DimensionMismatch { expected: self.horizon(), got: taus.horizon() });
        }
        if let StepTemperatures::PerStepDim(rows) = &taus {
            if let Some(row) = rows.iter().find(|r| r.len() != self.dim()) {
                return Err(ForecastError::DimensionMismatch { expected: self.dim(), got: row.len() });
            }
        }
        Ok(Self { step_tau: Some(taus), ..self.clone() })
    }

    /// Multiplies every component temperature by `tau` (one shared scale).
    pub fn with_global_temperature(&self, tau: f64) -> Self {
        let taus = match &self.step_tau {
            Some(existing) => existing.scale(tau),
            None => StepTemperatures::PerStep(vec![tau; self.horizon()]),
        };
        Self { step_tau: Some(taus), ..self.clone() }
    }

    /// Step covariance after calibration.
    pub fn calibrated_cov(&self, t: usize) -> DMatrix<f64> {
        match &self.step_tau {
            Some(taus) => taus.apply(t, &self.step_covs[t]),
            None => self.step_covs[t].clone(),
        }
    }

    /// Calibrated per-step marginals `N(x̄_t, Σ̃_t / tau_t)`.
    pub fn step_gaussians(&self) -> Result<Vec<GaussianForecast>, ForecastError> {
        (0..self.horizon())
            .map(|t| GaussianForecast::new(self.means[t].clone(), self.calibrated_cov(t)))
            .collect()
    }

    /// Block-diagonal joint log-density `Σ_t log N(x_t; x̄_t, Σ̃_t / tau_t)`.
    pub fn log_score(&self, xs: &[DVector<f64>]) -> Result<f64, ForecastError> {
        if xs.len() != self.horizon() {
            return Err(ForecastError::DimensionMismatch { expected: self.horizon(), got: xs.len() });
        }
        let mut total = 0.0;
        for (g, x) in self.step_gaussians()?.iter().zip(xs) {
            total += g.log_density(x)?;
        }
        Ok(total)
    }
}

pub fn trajectory_log_score(tf: &TrajectoryForecast, xs: &[DVector<f64>]) -> Result<f64, ForecastError> {
    tf.log_score(xs)
}

pub fn rollout(
    model: &dyn DynamicsModel,
    x0: &DVector<f64>,
    horizon: usize,
) -> Result<TrajectoryForecast, TrajectoryError> {
    rollout_with(model, x0, horizon, CovarianceMode::Accumulated)
}

pub fn rollout_with(
    model: &dyn DynamicsModel,
    x0: &DVector<f64>,
    horizon: usize,
    mode: CovarianceMode,
) -> Result<TrajectoryForecast, TrajectoryError> {
    if horizon == 0 {
        return Err(TrajectoryError::ZeroHorizon);
    }
    let d = model.dim();
    if x0.len() != d {
        return Err(ForecastError::DimensionMismatch { expected: d, got: x0.len() }.into());
    }
    let mut means = Vec::with_capacity(horizon);
    let mut covs = Vec::with_capacity(horizon);
    let mut x = x0.clone();
    let mut acc = DMatrix::zeros(d, d);
    for _ in 0..horizon {
        let (mu, sigma) = model.step(&x)?;
        let cov = match mode {
            CovarianceMode::Accumulated => {
                acc += &sigma;
                acc.clone()
            }
            CovarianceMode::OneStep => sigma,
        };
        means.push(mu.clone());
        covs.push(cov);
        x = mu;
    }
    Ok(TrajectoryForecast::new(means, covs)?)
}

/// A matrix `L` with `L L^T = cov` for positive semidefinite `cov`.
pub(crate) fn psd_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = nalgebra::Cholesky::new(cov.clone()) {
        return ch.l();
    }
    let eig = cov.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// Stochastic rollout `x*_{t+1} ~ N(μ(x*_t), Σ(x*_t))` driven by `rng`.
pub fn sample_truth_with<R: Rng + ?Sized>(
    model: &dyn DynamicsModel,
    x0: &DVector<f64>,
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>, TrajectoryError> {
    if horizon == 0 {
        return Err(TrajectoryError::ZeroHorizon);
    }
    let d = model.dim();
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let (mu, sigma) = model.step(&x)?;
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        x = mu + psd_sqrt(&sigma) * z;
        out.push(x.clone());
    }
    Ok(out)
}

pub fn sample_truth(
    model: &dyn DynamicsModel,
    x0: &DVector<f64>,
    horizon: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>, TrajectoryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_truth_with(model, x0, horizon, &mut rng)
}

/// Per-step ellipsoids induced by a joint threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    /// `2T - Σ_t (d ln 2π + ln det Σ̃_t)` on the full `H·d`-dimensional joint.
    pub radius_sq: f64,
    pub steps: Vec<EllipsoidSet>,
}

impl TrajectorySet {
    pub fn step_sizes(&self) -> Vec<f64> {
        self.steps.iter().map(|e| e.size).collect()
    }

    /// `H^{-1} Σ_t ‖Λ_t‖_F`.
    pub fn mean_size(&self) -> f64 {
        self.steps.iter().map(|e| e.size).sum::<f64>() / self.steps.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.radius_sq <= 0.0
    }
}

pub fn per_step_sets(tf: &TrajectoryForecast, threshold: Threshold) -> Result<TrajectorySet, ConfsetError> {
    let gaussians = tf.step_gaussians()?;
    let norm: f64 = gaussians.iter().map(|g| g.dim() as f64 * LN_2PI + g.log_det()).sum();
    let radius_sq = 2.0 * threshold.0 - norm;
    let steps = gaussians
        .iter()
        .map(|g| confset::ellipsoid_with_radius(g.mean(), g.cov(), radius_sq))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TrajectorySet { radius_sq, steps })
}

/// Fits per-step (or per-step-and-coordinate) temperatures by maximizing
/// each step's marginal likelihood independently. Any temperatures already
/// attached to the forecasts are ignored.
pub fn calibrate_trajectory(
    rollouts: &[(TrajectoryForecast, Vec<DVector<f64>>)],
    mode: StepCalibrationMode,
) -> Result<StepTemperatures, TrajectoryError> {
    if rollouts.len() < 2 {
        return Err(TrajectoryError::TooFewRollouts(rollouts.len()));
    }
    let horizon = rollouts[0].0.horizon();
    let d = rollouts[0].0.dim();
    for (tf, xs) in rollouts {
        if tf.horizon() != horizon || xs.len() != horizon {
            return Err(ForecastError::DimensionMismatch { expected: horizon, got: xs.len().min(tf.horizon()) }.into());
        }
        if tf.dim() != d {
            return Err(ForecastError::DimensionMismatch { expected: d, got: tf.dim() }.into());
        }
    }
    match mode {
        StepCalibrationMode::PerStep => {
            let mut taus = Vec::with_capacity(horizon);
            for t in 0..horizon {
                let terms = rollouts
                    .iter()
                    .map(|(tf, xs)| {
                        let g = GaussianForecast::new(tf.means[t].clone(), tf.step_covs[t].clone())?;
                        NllTerm::gaussian(&g, &xs[t])
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                taus.push(fit_tau(&terms)?);
            }
            Ok(StepTemperatures::PerStep(taus))
        }
        StepCalibrationMode::PerStepDim => {
            let mut taus = Vec::with_capacity(horizon);
            for t in 0..horizon {
                let mut row = Vec::with_capacity(d);
                for j in 0..d {
                    let terms = rollouts
                        .iter()
                        .map(|(tf, xs)| {
                            let g = GaussianForecast::univariate(tf.means[t][j], tf.step_covs[t][(j, j)].sqrt())?;
                            NllTerm::gaussian(&g, &DVector::from_element(1, xs[t][j]))
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    row.push(fit_tau(&terms)?);
                }
                taus.push(row);
            }
            Ok(StepTemperatures::PerStepDim(taus))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::{fit_temperature, Forecast, Label};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn identity_rollout_accumulates() {
        let m = LinearGaussian::identity(2, 1.0);
        let tf = rollout(&m, &v(&[0.0, 0.0]), 3).unwrap();
        for t in 0..3 {
            assert_eq!(tf.means()[t], v(&[0.0, 0.0]));
            assert_eq!(tf.step_covs()[t], DMatrix::identity(2, 2) * (t + 1) as f64);
        }
    }

    #[test]
    fn contracting_rollout_by_hand() {
        let m = LinearGaussian::new(DMatrix::identity(2, 2) * 0.5, DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let tf = rollout(&m, &v(&[1.0, 0.0]), 2).unwrap();
        assert_eq!(tf.means()[0], v(&[0.5, 0.0]));
        assert_eq!(tf.means()[1], v(&[0.25, 0.0]));
        assert_eq!(tf.step_covs()[0], DMatrix::identity(2, 2));
        assert_eq!(tf.step_covs()[1], DMatrix::identity(2, 2) * 2.0);

        let one = rollout_with(&m, &v(&[1.0, 0.0]), 2, CovarianceMode::OneStep).unwrap();
        assert_eq!(one.step_covs()[1], DMatrix::identity(2, 2));
    }

    #[test]
    fn horizon_one_is_one_step_forecast() {
        let m = LinearGaussian::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]),
            v(&[0.1, -0.2]),
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
        )
        .unwrap();
        let x0 = v(&[1.0, 2.0]);
        let tf = rollout(&m, &x0, 1).unwrap();
        let (mu, sigma) = m.step(&x0).unwrap();
        let g = GaussianForecast::new(mu, sigma).unwrap();
        let y = v(&[1.3, 1.1]);
        let a = tf.log_score(std::slice::from_ref(&y)).unwrap();
        let b = g.log_density(&y).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(matches!(rollout(&m, &x0, 0), Err(TrajectoryError::ZeroHorizon)));
    }

    #[test]
    fn log_score_identity_plugin() {
        let m = LinearGaussian::identity(1, 1.0);
        let tf = rollout(&m, &v(&[0.0]), 2).unwrap();
        let got = tf.log_score(&[v(&[1.0]), v(&[1.0])]).unwrap();
        let expect = -0.5 - 0.25 - LN_2PI - 0.5 * 2f64.ln();
        assert!((got - expect).abs() < 1e-14);
        // at the mode only the normalizers remain
        let mode = tf.log_score(tf.means()).unwrap();
        assert!((mode - (-LN_2PI - 0.5 * 2f64.ln())).abs() < 1e-14);
        assert!(tf.log_score(&[v(&[1.0])]).is_err());
    }

    #[test]
    fn deterministic_model_samples_equal_mean() {
        let m = LinearGaussian::new(DMatrix::identity(2, 2) * 0.7, v(&[0.5, 0.0]), DMatrix::zeros(2, 2)).unwrap();
        let x0 = v(&[1.0, -1.0]);
        let xs = sample_truth(&m, &x0, 4, 3).unwrap();
        let mut x = x0;
        for sample in xs {
            x = &m.a * &x + &m.b;
            assert!((sample - &x).amax() < 1e-15);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let m = LinearGaussian::identity(3, 1.0);
        let a = sample_truth(&m, &DVector::zeros(3), 5, 42).unwrap();
        let b = sample_truth(&m, &DVector::zeros(3), 5, 42).unwrap();
        let c = sample_truth(&m, &DVector::zeros(3), 5, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn tabulated_lookup() {
        let mut m = TabulatedModel::new(1);
        m.insert(v(&[0.0]), v(&[1.0]), DMatrix::from_element(1, 1, 0.5)).unwrap();
        m.insert(v(&[1.0]), v(&[1.5]), DMatrix::from_element(1, 1, 0.25)).unwrap();
        let tf = rollout(&m, &v(&[0.0]), 2).unwrap();
        assert_eq!(tf.means()[1], v(&[1.5]));
        assert_eq!(tf.step_covs()[1], DMatrix::from_element(1, 1, 0.75));
        assert!(matches!(rollout(&m, &v(&[0.0]), 3), Err(TrajectoryError::MissingRecord(_))));
    }

    #[test]
    fn per_step_sizes_closed_form() {
        let m = LinearGaussian::identity(2, 1.0);
        let tf = rollout(&m, &DVector::zeros(2), 4).unwrap();
        let t_joint = 12.0;
        let set = per_step_sets(&tf, Threshold(t_joint)).unwrap();
        let norm: f64 = (1..=4).map(|t| 2.0 * LN_2PI + 2.0 * (t as f64).ln()).sum();
        let r2 = 2.0 * t_joint - norm;
        assert!((set.radius_sq - r2).abs() < 1e-12);
        for (t, size) in set.step_sizes().iter().enumerate() {
            let expect = (r2 * 2.0 * (t + 1) as f64).sqrt();
            assert!((size - expect).abs() < 1e-10);
        }
        let sizes = set.step_sizes();
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn horizon_one_set_matches_ellipsoid() {
        let m = LinearGaussian::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        let tf = rollout(&m, &DVector::zeros(2), 1).unwrap();
        let g = GaussianForecast::new(tf.means()[0].clone(), tf.step_covs()[0].clone()).unwrap();
        let set = per_step_sets(&tf, Threshold(4.0)).unwrap();
        let e = confset::ellipsoid_set(&g, Threshold(4.0)).unwrap();
        assert!((set.steps[0].size - e.size).abs() < 1e-12);
        assert!((set.radius_sq - e.radius_sq).abs() < 1e-12);
    }

    fn simulated_rollouts(
        truth: &LinearGaussian,
        reported: &LinearGaussian,
        count: usize,
        horizon: usize,
    ) -> Vec<(TrajectoryForecast, Vec<DVector<f64>>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..count)
            .map(|_| {
                let x0 = DVector::from_fn(truth.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
                let tf = rollout(reported, &x0, horizon).unwrap();
                let xs = sample_truth_with(truth, &x0, horizon, &mut rng).unwrap();
                (tf, xs)
            })
            .collect()
    }

    #[test]
    fn overdispersed_model_recovers_scale() {
        let truth = LinearGaussian::identity(2, 1.0);
        let reported = LinearGaussian::identity(2, 4.0);
        let data = simulated_rollouts(&truth, &reported, 4000, 3);
        let StepTemperatures::PerStep(taus) = calibrate_trajectory(&data, StepCalibrationMode::PerStep).unwrap() else {
            panic!("wrong mode");
        };
        for tau in taus {
            assert!((tau - 4.0).abs() < 0.3, "tau={tau}");
        }
        let StepTemperatures::PerStepDim(rows) = calibrate_trajectory(&data, StepCalibrationMode::PerStepDim).unwrap() else {
            panic!("wrong mode");
        };
        assert_eq!(rows.len(), 3);
        for tau in rows.into_iter().flatten() {
            assert!((tau - 4.0).abs() < 0.4, "tau={tau}");
        }
    }

    #[test]
    fn single_step_calibration_matches_gaussian_fit() {
        let truth = LinearGaussian::identity(2, 1.0);
        let reported = LinearGaussian::identity(2, 2.0);
        let data = simulated_rollouts(&truth, &reported, 300, 1);
        let StepTemperatures::PerStep(taus) = calibrate_trajectory(&data, StepCalibrationMode::PerStep).unwrap() else {
            panic!("wrong mode");
        };
        let cal: Vec<_> = data
            .iter()
            .map(|(tf, xs)| {
                let g = GaussianForecast::new(tf.means()[0].clone(), tf.step_covs()[0].clone()).unwrap();
                (Forecast::Gaussian(g), Label::Vector(xs[0].clone()))
            })
            .collect();
        let tau = fit_temperature(&cal).unwrap().tau;
        assert!((taus[0] - tau).abs() < 1e-12 * tau.max(1.0));
        assert!(matches!(
            calibrate_trajectory(&data[..1], StepCalibrationMode::PerStep),
            Err(TrajectoryError::TooFewRollouts(1))
        ));
    }

    #[test]
    fn step_temperatures_scale_covariances() {
        let m = LinearGaussian::identity(2, 1.0);
        let tf = rollout(&m, &DVector::zeros(2), 2).unwrap();
        let cal = tf.with_step_temperatures(StepTemperatures::PerStep(vec![2.0, 4.0])).unwrap();
        assert_eq!(cal.calibrated_cov(1), DMatrix::identity(2, 2) * 0.5);
        let cal = tf
            .with_step_temperatures(StepTemperatures::PerStepDim(vec![vec![1.0, 4.0], vec![1.0, 1.0]]))
            .unwrap();
        assert_eq!(cal.calibrated_cov(0), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.25]));
        let g = tf.with_global_temperature(2.0);
        assert_eq!(g.calibrated_cov(1), DMatrix::identity(2, 2));
        assert!(tf.with_step_temperatures(StepTemperatures::PerStep(vec![1.0])).is_err());
    }
}
