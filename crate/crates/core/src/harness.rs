//! Synthetic worlds with known coverage, Monte-Carlo verification of the
//! `(ε, δ)` guarantee, evaluation summaries, and parameter sweeps.
//!
//! Every world knows its own miscoverage `P[log f(y|x) < -T]` for any
//! calibration, either in closed form or from a fixed Monte-Carlo pool, so a
//! trial's true error is computed rather than estimated from a test set.
//!
//! Trial `i` of a run with master seed `s` draws from
//! `ChaCha8Rng::seed_from_u64(trial_seed(s, i))`; trials never share state, so
//! results do not depend on the thread count.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::mass_set_categorical;
use crate::bounds::{alpha_for, BoundKind, BoundsError, PacParams};
use crate::confset::{ConfidenceSet, Threshold};
use crate::estimator::{
    end_to_end, fit_artifact, fit_calibration, Artifact, Calibration, CalibrationMode, Example, PipelineConfig,
    PipelineError,
};
use crate::forecaster::{CategoricalForecast, Forecast, GaussianForecast, Label, LN_2PI};
use crate::special::chi2_sf;
use crate::trajectory::{rollout_with, sample_truth_with, CovarianceMode, LinearGaussian, StepCalibrationMode};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),

    #[error("at least 100 trials are required, got {0}")]
    TooFewTrials(usize),

    #[error("no examples to evaluate")]
    EmptyInput,

    #[error("invalid world: {0}")]
    InvalidWorld(String),

    #[error("{0} is not supported by the {1} world")]
    Unsupported(&'static str, &'static str),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<BoundsError> for HarnessError {
    fn from(e: BoundsError) -> Self {
        HarnessError::Pipeline(e.into())
    }
}

impl HarnessError {
    pub fn is_infeasible(&self) -> bool {
        matches!(self, HarnessError::Pipeline(e) if e.is_infeasible())
    }
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `index`: `splitmix64(master + (index + 1) * 0x9E3779B97F4A7C15)`.
pub fn trial_seed(master: u64, index: u64) -> u64 {
    splitmix64(master.wrapping_add(GOLDEN_GAMMA.wrapping_mul(index.wrapping_add(1))))
}

/// Miscoverage of a fitted set under the world's true distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrueError {
    pub value: f64,
    /// Monte-Carlo standard error; zero for closed forms.
    pub mc_se: f64,
}

impl TrueError {
    fn exact(value: f64) -> Self {
        TrueError { value, mc_se: 0.0 }
    }
}

pub trait World: Sync {
    fn name(&self) -> &'static str;

    /// Whether examples are trajectories (calibrated per step).
    fn is_trajectory(&self) -> bool {
        false
    }

    /// Draws `n` i.i.d. examples with ids `{tag}{i}`.
    fn draw(&self, rng: &mut ChaCha8Rng, n: usize, tag: &str) -> Vec<Example>;

    /// `P[log f_cal(y|x) < -T]` over the world's distribution.
    fn true_error(&self, cal: &Calibration, t: Threshold) -> Result<TrueError, HarnessError>;
}

fn ln_sigmoid_neg(x: f64) -> f64 {
    // ln(1 / (1 + e^x))
    if x > 0.0 {
        -x - (-x).exp().ln_1p()
    } else {
        -(x.exp().ln_1p())
    }
}

/// Two-label forecasts whose true-label score `-log f(y|x)` is `Exp(1)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpScoreWorld;

impl ExpScoreWorld {
    fn forecast(e: f64) -> CategoricalForecast {
        CategoricalForecast::new(vec![-e, (-(-e).exp()).ln_1p()]).expect("two-point forecast is normalized")
    }
}

impl World for ExpScoreWorld {
    fn name(&self) -> &'static str {
        "exp_score"
    }

    fn draw(&self, rng: &mut ChaCha8Rng, n: usize, tag: &str) -> Vec<Example> {
        (0..n)
            .map(|i| {
                let e: f64 = rng.sample(Exp1);
                Example {
                    id: format!("{tag}{i}"),
                    forecast: Forecast::Categorical(Self::forecast(e)),
                    label: Label::Class(0),
                }
            })
            .collect()
    }

    fn true_error(&self, cal: &Calibration, t: Threshold) -> Result<TrueError, HarnessError> {
        let t = t.0;
        if t <= 0.0 {
            return Ok(TrueError::exact(1.0));
        }
        let tau = match cal {
            Calibration::Identity => return Ok(TrueError::exact((-t).exp().min(1.0))),
            Calibration::Global(tau) => *tau,
            Calibration::Steps(_) => return Err(HarnessError::Unsupported("per-step calibration", self.name())),
        };
        // f_tau(y) = 1 / (1 + ((1-p)/p)^tau) is increasing in p = e^{-E}, so the
        // set misses exactly when p < p* = 1 / (1 + (e^T - 1)^{1/tau}), and
        // P[e^{-E} < p*] = p*.
        let ln_expm1_t = t + (-(-t).exp()).ln_1p();
        Ok(TrueError::exact(ln_sigmoid_neg(ln_expm1_t / tau).exp()))
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategoricalParams {
    pub inputs: usize,
    pub labels: usize,
    /// Reports are `normalize(p^gamma)`; `gamma > 1` is overconfident.
    pub gamma: f64,
    /// Scale of the standard-normal logits behind each true `p_x`.
    pub spread: f64,
    pub world_seed: u64,
}

impl Default for CategoricalParams {
    fn default() -> Self {
        CategoricalParams { inputs: 200, labels: 10, gamma: 3.0, spread: 2.0, world_seed: 7 }
    }
}

/// Finitely many equally likely inputs, each with its own true label
/// distribution and a distorted report of it.
#[derive(Debug, Clone)]
pub struct CategoricalWorld {
    params: CategoricalParams,
    truth: Vec<Vec<f64>>,
    reports: Vec<CategoricalForecast>,
}

impl CategoricalWorld {
    pub fn new(params: CategoricalParams) -> Result<Self, HarnessError> {
        if params.inputs == 0 || params.labels < 2 {
            return Err(HarnessError::InvalidWorld("categorical world needs inputs >= 1 and labels >= 2".into()));
        }
        if !(params.gamma > 0.0 && params.gamma.is_finite()) || !params.spread.is_finite() {
            return Err(HarnessError::InvalidWorld("gamma must be positive and spread finite".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.world_seed);
        let mut truth = Vec::with_capacity(params.inputs);
        let mut reports = Vec::with_capacity(params.inputs);
        for _ in 0..params.inputs {
            let logits: Vec<f64> =
                (0..params.labels).map(|_| params.spread * rng.sample::<f64, _>(StandardNormal)).collect();
            let p = softmax(&logits);
            let report = CategoricalForecast::from_log_weights(p.iter().map(|v| params.gamma * v.ln()).collect())
                .map_err(|e| HarnessError::InvalidWorld(e.to_string()))?;
            truth.push(p);
            reports.push(report);
        }
        Ok(CategoricalWorld { params, truth, reports })
    }

    pub fn params(&self) -> &CategoricalParams {
        &self.params
    }

    /// Exact miscoverage of the per-input `(1-ε)`-mass sets built from the
    /// reports.
    pub fn baseline_true_error(&self, epsilon: f64) -> f64 {
        let total: f64 = self
            .truth
            .iter()
            .zip(&self.reports)
            .map(|(p, q)| {
                let set = mass_set_categorical(q, epsilon);
                1.0 - set.iter().map(|y| p[*y]).sum::<f64>()
            })
            .sum();
        (total / self.truth.len() as f64).max(0.0)
    }
}

impl World for CategoricalWorld {
    fn name(&self) -> &'static str {
        "categorical"
    }

    fn draw(&self, rng: &mut ChaCha8Rng, n: usize, tag: &str) -> Vec<Example> {
        (0..n)
            .map(|i| {
                let x = rng.random_range(0..self.truth.len());
                let y = sample_index(&self.truth[x], rng.random::<f64>());
                Example {
                    id: format!("{tag}{i}"),
                    forecast: Forecast::Categorical(self.reports[x].clone()),
                    label: Label::Class(y),
                }
            })
            .collect()
    }

    fn true_error(&self, cal: &Calibration, t: Threshold) -> Result<TrueError, HarnessError> {
        let level = t.log_level();
        let mut total = 0.0;
        for (p, q) in self.truth.iter().zip(&self.reports) {
            let f = match cal.apply(&Forecast::Categorical(q.clone())).map_err(PipelineError::from)? {
                Forecast::Categorical(c) => c,
                _ => unreachable!("calibration preserves the forecast kind"),
            };
            total += f.log_probs().iter().zip(p).filter(|(lp, _)| **lp < level).map(|(_, py)| py).sum::<f64>();
        }
        Ok(TrueError::exact(total / self.truth.len() as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianParams {
    pub dim: usize,
    pub inputs: usize,
    /// Reports are `N(μ_x, scale · Σ_x)`.
    pub scale: f64,
    pub world_seed: u64,
}

impl Default for GaussianParams {
    fn default() -> Self {
        GaussianParams { dim: 2, inputs: 100, scale: 0.5, world_seed: 11 }
    }
}

/// Finitely many inputs with Gaussian outputs `N(μ_x, s_x² S)`.
#[derive(Debug, Clone)]
pub struct GaussianWorld {
    params: GaussianParams,
    chol: Vec<DMatrix<f64>>,
    reports: Vec<GaussianForecast>,
}

impl GaussianWorld {
    pub fn new(params: GaussianParams) -> Result<Self, HarnessError> {
        if params.dim == 0 || params.inputs == 0 {
            return Err(HarnessError::InvalidWorld("gaussian world needs dim >= 1 and inputs >= 1".into()));
        }
        if !(params.scale > 0.0 && params.scale.is_finite()) {
            return Err(HarnessError::InvalidWorld("scale must be positive".into()));
        }
        let d = params.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(params.world_seed);
        let b = DMatrix::from_fn(d, d, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
        let shape = &b * b.transpose() + DMatrix::identity(d, d) * 0.5;
        let mut chol = Vec::with_capacity(params.inputs);
        let mut reports = Vec::with_capacity(params.inputs);
        for _ in 0..params.inputs {
            let mean = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let s: f64 = (0.5 * rng.sample::<f64, _>(StandardNormal)).exp();
            let cov = &shape * (s * s);
            let truth = GaussianForecast::new(mean.clone(), cov.clone()).map_err(|e| HarnessError::InvalidWorld(e.to_string()))?;
            chol.push(truth.chol_factor());
            reports.push(
                GaussianForecast::new(mean, cov * params.scale).map_err(|e| HarnessError::InvalidWorld(e.to_string()))?,
            );
        }
        Ok(GaussianWorld { params, chol, reports })
    }

    pub fn params(&self) -> &GaussianParams {
        &self.params
    }
}

impl World for GaussianWorld {
    fn name(&self) -> &'static str {
        "gaussian"
    }

    fn draw(&self, rng: &mut ChaCha8Rng, n: usize, tag: &str) -> Vec<Example> {
        let d = self.params.dim;
        (0..n)
            .map(|i| {
                let x = rng.random_range(0..self.reports.len());
                let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let y = self.reports[x].mean() + &self.chol[x] * z;
                Example {
                    id: format!("{tag}{i}"),
                    forecast: Forecast::Gaussian(self.reports[x].clone()),
                    label: Label::Vector(y),
                }
            })
            .collect()
    }

    fn true_error(&self, cal: &Calibration, t: Threshold) -> Result<TrueError, HarnessError> {
        // calibrated covariance is kappa * Σ_x, so the reported Mahalanobis
        // distance of a true draw is chi2_d / kappa
        let kappa = match cal {
            Calibration::Identity => self.params.scale,
            Calibration::Global(tau) => self.params.scale / tau,
            Calibration::Steps(_) => return Err(HarnessError::Unsupported("per-step calibration", self.name())),
        };
        let d = self.params.dim;
        let total: f64 = self
            .reports
            .iter()
            .map(|g| {
                let log_norm = g.log_norm_const() + d as f64 * (kappa / self.params.scale).ln();
                chi2_sf(d, kappa * (2.0 * t.0 - log_norm))
            })
            .sum();
        Ok(TrueError::exact(total / self.reports.len() as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsParams {
    pub dim: usize,
    pub horizon: usize,
    /// Dynamics matrix `a · I`.
    pub a: f64,
    /// True process noise `q · I`.
    pub q: f64,
    /// The model reports process noise `scale · q · I`.
    pub scale: f64,
    /// Accumulate step covariances along the rollout (off: one-step only).
    pub accumulate: bool,
    /// Size of the residual pool behind the Monte-Carlo true error.
    pub pool: usize,
    pub world_seed: u64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        DynamicsParams {
            dim: 2,
            horizon: 20,
            a: 1.0,
            q: 1.0,
            scale: 1.0,
            accumulate: true,
            pool: 100_000,
            world_seed: 13,
        }
    }
}

/// Linear-Gaussian dynamics `x_{t+1} = a x_t + w_t`, `w_t ~ N(0, q I)`,
/// started from `x_0 ~ N(0, I)`, forecast by rolling out a model with the
/// right mean and rescaled noise.
#[derive(Debug, Clone)]
pub struct DynamicsWorld {
    params: DynamicsParams,
    truth: LinearGaussian,
    model: LinearGaussian,
    /// Squared residuals `(x_t - x̄_t)_j²`, `horizon * dim` per pool entry.
    /// Residuals do not depend on `x_0` because the dynamics are linear.
    pool_sq: Vec<f64>,
}

impl DynamicsWorld {
    pub fn new(params: DynamicsParams) -> Result<Self, HarnessError> {
        let DynamicsParams { dim, horizon, a, q, scale, pool, .. } = params;
        if dim == 0 || horizon == 0 || pool == 0 {
            return Err(HarnessError::InvalidWorld("dynamics world needs dim, horizon, pool >= 1".into()));
        }
        if !(q > 0.0 && scale > 0.0 && a.is_finite()) {
            return Err(HarnessError::InvalidWorld("q and scale must be positive".into()));
        }
        let eye = DMatrix::identity(dim, dim);
        let build = |noise: f64| {
            LinearGaussian::new(&eye * a, DVector::zeros(dim), &eye * noise)
                .map_err(|e| HarnessError::InvalidWorld(e.to_string()))
        };
        let truth = build(q)?;
        let model = build(scale * q)?;

        let mut rng = ChaCha8Rng::seed_from_u64(params.world_seed);
        let sd = q.sqrt();
        let mut pool_sq = Vec::with_capacity(pool * horizon * dim);
        let mut e = vec![0.0; dim];
        for _ in 0..pool {
            e.iter_mut().for_each(|v| *v = 0.0);
            for _ in 0..horizon {
                for v in e.iter_mut() {
                    *v = a * *v + sd * rng.sample::<f64, _>(StandardNormal);
                    pool_sq.push(*v * *v);
                }
            }
        }
        Ok(DynamicsWorld { params, truth, model, pool_sq })
    }

    pub fn params(&self) -> &DynamicsParams {
        &self.params
    }

    fn covariance_mode(&self) -> CovarianceMode {
        if self.params.accumulate {
            CovarianceMode::Accumulated
        } else {
            CovarianceMode::OneStep
        }
    }

    /// Diagonal of the calibrated step covariances, `horizon * dim` entries.
    fn calibrated_variances(&self, cal: &Calibration) -> Result<Vec<f64>, HarnessError> {
        let x0 = DVector::zeros(self.params.dim);
        let tf = rollout_with(&self.model, &x0, self.params.horizon, self.covariance_mode())
            .map_err(PipelineError::from)?;
        let tf = match cal.apply(&Forecast::Trajectory(tf)).map_err(PipelineError::from)? {
            Forecast::Trajectory(tf) => tf,
            _ => unreachable!("calibration preserves the forecast kind"),
        };
        let mut v = Vec::with_capacity(self.params.horizon * self.params.dim);
        for t in 0..self.params.horizon {
            let c = tf.calibrated_cov(t);
            v.extend((0..self.params.dim).map(|j| c[(j, j)]));
        }
        Ok(v)
    }
}

impl World for DynamicsWorld {
    fn name(&self) -> &'static str {
        "dynamics"
    }

    fn is_trajectory(&self) -> bool {
        true
    }

    fn draw(&self, rng: &mut ChaCha8Rng, n: usize, tag: &str) -> Vec<Example> {
        let d = self.params.dim;
        (0..n)
            .map(|i| {
                let x0 = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let xs = sample_truth_with(&self.truth, &x0, self.params.horizon, rng).expect("valid horizon");
                let tf = rollout_with(&self.model, &x0, self.params.horizon, self.covariance_mode())
                    .expect("valid rollout");
                Example { id: format!("{tag}{i}"), forecast: Forecast::Trajectory(tf), label: Label::Trajectory(xs) }
            })
            .collect()
    }

    fn true_error(&self, cal: &Calibration, t: Threshold) -> Result<TrueError, HarnessError> {
        let v = self.calibrated_variances(cal)?;
        let norm: f64 = v.iter().map(|s| LN_2PI + s.ln()).sum();
        let inv: Vec<f64> = v.iter().map(|s| 1.0 / s).collect();
        // log f < -T  <=>  Σ e²/v > 2T - norm
        let cut = 2.0 * t.0 - norm;
        let misses = self
            .pool_sq
            .chunks_exact(v.len())
            .filter(|sq| sq.iter().zip(&inv).map(|(e2, w)| e2 * w).sum::<f64>() > cut)
            .count();
        let m = self.params.pool as f64;
        let p = misses as f64 / m;
        Ok(TrueError { value: p, mc_se: (p * (1.0 - p) / m).sqrt() })
    }
}

/// Serializable description of a synthetic world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSpec {
    ExpScore,
    Categorical(CategoricalParams),
    Gaussian(GaussianParams),
    Dynamics(DynamicsParams),
}

impl SyntheticSpec {
    /// Default parameters for a world named `exp_score`, `categorical`,
    /// `gaussian`, or `dynamics` (dashes accepted).
    pub fn named(name: &str) -> Option<Self> {
        match name.replace('-', "_").as_str() {
            "exp_score" => Some(SyntheticSpec::ExpScore),
            "categorical" => Some(SyntheticSpec::Categorical(Default::default())),
            "gaussian" => Some(SyntheticSpec::Gaussian(Default::default())),
            "dynamics" => Some(SyntheticSpec::Dynamics(Default::default())),
            _ => None,
        }
    }

    pub fn build(&self) -> Result<Box<dyn World>, HarnessError> {
        Ok(match self {
            SyntheticSpec::ExpScore => Box::new(ExpScoreWorld),
            SyntheticSpec::Categorical(p) => Box::new(CategoricalWorld::new(*p)?),
            SyntheticSpec::Gaussian(p) => Box::new(GaussianWorld::new(*p)?),
            SyntheticSpec::Dynamics(p) => Box::new(DynamicsWorld::new(*p)?),
        })
    }
}

/// Pipeline switches for verification runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PipelineFlags {
    pub calibrate: bool,
    pub bound: BoundKind,
    /// Calibration examples drawn per trial when `calibrate` is set.
    pub calibration_size: usize,
    /// Used for trajectory worlds.
    pub step_mode: StepCalibrationMode,
}

impl Default for PipelineFlags {
    fn default() -> Self {
        PipelineFlags {
            calibrate: true,
            bound: BoundKind::Direct,
            calibration_size: 1000,
            step_mode: StepCalibrationMode::PerStep,
        }
    }
}

impl PipelineFlags {
    pub fn calibration_mode(&self, world: &dyn World) -> CalibrationMode {
        match (self.calibrate, world.is_trajectory()) {
            (false, _) => CalibrationMode::None,
            (true, false) => CalibrationMode::Global,
            (true, true) => CalibrationMode::Steps(self.step_mode),
        }
    }

    fn config(&self, world: &dyn World, epsilon: f64, delta: f64) -> PipelineConfig {
        PipelineConfig { epsilon, delta, bound: self.bound, calibration: self.calibration_mode(world) }
    }

    fn calibration_draws(&self) -> usize {
        if self.calibrate {
            self.calibration_size
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub seed: u64,
    pub tau: Option<f64>,
    #[serde(rename = "T_hat")]
    pub t_hat: f64,
    pub effective_k: u64,
    pub true_error: f64,
    pub mc_se: f64,
    /// `true_error > ε`.
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PacReport {
    pub world: &'static str,
    pub n: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub bound: BoundKind,
    pub calibrate: bool,
    pub trials: u64,
    pub master_seed: u64,
    pub k_star: u64,
    pub alpha: f64,
    pub failures: u64,
    pub failure_rate: f64,
    /// One-sided Wilson upper bound (z = 3) on the failure probability.
    pub failure_rate_upper: f64,
    #[serde(skip)]
    pub records: Vec<TrialRecord>,
}

impl PacReport {
    /// `failure_rate <= δ + 3 sqrt(δ(1-δ)/trials)`.
    pub fn within_delta(&self) -> bool {
        self.failure_rate <= self.delta + pac_slack(self.delta, self.trials)
    }
}

/// Three binomial standard errors of a rate `δ` over `trials` draws.
pub fn pac_slack(delta: f64, trials: u64) -> f64 {
    3.0 * (delta * (1.0 - delta) / trials as f64).sqrt()
}

fn wilson_upper(successes: u64, trials: u64, z: f64) -> f64 {
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = p + z2 / (2.0 * n);
    let spread = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre + spread) / (1.0 + z2 / n)).min(1.0)
}

/// Runs `trials` independent fits on fresh validation (and calibration)
/// draws and counts how often the true error exceeds `ε`.
pub fn verify_pac(
    world: &dyn World,
    params: &PacParams,
    trials: usize,
    flags: &PipelineFlags,
    seed: u64,
) -> Result<PacReport, HarnessError> {
    if trials < 100 {
        return Err(HarnessError::TooFewTrials(trials));
    }
    let budget = alpha_for(params, flags.bound)?;
    let config = flags.config(world, params.epsilon, params.delta);
    let n = params.n as usize;
    let records = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let seed = trial_seed(seed, trial);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cal = world.draw(&mut rng, flags.calibration_draws(), "c");
            let val = world.draw(&mut rng, n, "v");
            let artifact = end_to_end(&cal, &val, &config)?;
            let te = world.true_error(&artifact.calibration(), artifact.threshold())?;
            Ok(TrialRecord {
                trial,
                seed,
                tau: artifact.tau,
                t_hat: artifact.t_hat,
                effective_k: artifact.effective_k,
                true_error: te.value,
                mc_se: te.mc_se,
                failed: te.value > params.epsilon,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let failures = records.iter().filter(|r| r.failed).count() as u64;
    Ok(PacReport {
        world: world.name(),
        n: params.n,
        epsilon: params.epsilon,
        delta: params.delta,
        bound: flags.bound,
        calibrate: flags.calibrate,
        trials: trials as u64,
        master_seed: seed,
        k_star: budget.k_star,
        alpha: budget.alpha(),
        failures,
        failure_rate: failures as f64 / trials as f64,
        failure_rate_upper: wilson_upper(failures, trials as u64, 3.0),
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub errors: u64,
    pub n: u64,
    #[serde(rename = "L_hat")]
    pub l_hat: f64,
    pub epsilon: f64,
    /// `L̂ < ε`.
    pub valid: bool,
}

impl EvalReport {
    pub fn from_counts(errors: u64, n: u64, epsilon: f64) -> Result<Self, HarnessError> {
        if n == 0 {
            return Err(HarnessError::EmptyInput);
        }
        let l_hat = errors as f64 / n as f64;
        Ok(EvalReport { errors, n, l_hat, epsilon, valid: l_hat < epsilon })
    }
}

/// Fraction of `test` whose label falls outside its set.
pub fn empirical_error(artifact: &Artifact, test: &[Example]) -> Result<EvalReport, HarnessError> {
    let covered = test
        .par_iter()
        .map(|e| artifact.covers(e))
        .collect::<Result<Vec<bool>, _>>()
        .map_err(PipelineError::from)?;
    let errors = covered.iter().filter(|c| !**c).count() as u64;
    EvalReport::from_counts(errors, test.len() as u64, artifact.epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeStats {
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub count: usize,
}

impl SizeStats {
    /// `None` for an empty slice.
    pub fn from_sizes(sizes: &[f64]) -> Option<Self> {
        if sizes.is_empty() {
            return None;
        }
        let mut s = sizes.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        Some(SizeStats { median, min: s[0], max: s[n - 1], mean: s.iter().sum::<f64>() / n as f64, count: n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeReport {
    pub all: SizeStats,
    /// Categorical inputs whose top label is the true one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<SizeStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub incorrect: Option<SizeStats>,
}

/// Whether the top-scoring label is the true label; `None` for
/// non-categorical examples.
pub fn top1_correct(e: &Example) -> Option<bool> {
    match (&e.forecast, &e.label) {
        (Forecast::Categorical(c), Label::Class(y)) => Some(c.argmax() == *y),
        _ => None,
    }
}

/// Set sizes of `examples` under `artifact`, split by top-1 correctness for
/// categorical inputs.
pub fn size_stats(artifact: &Artifact, examples: &[Example]) -> Result<SizeReport, HarnessError> {
    let sets = examples
        .par_iter()
        .map(|e| artifact.confidence_set(&e.forecast))
        .collect::<Result<Vec<ConfidenceSet>, _>>()?;
    let sizes: Vec<f64> = sets.iter().map(ConfidenceSet::size).collect();
    let all = SizeStats::from_sizes(&sizes).ok_or(HarnessError::EmptyInput)?;
    let split: Vec<Option<bool>> = examples.iter().map(top1_correct).collect();
    let pick = |want: bool| {
        let s: Vec<f64> = sizes.iter().zip(&split).filter(|(_, c)| **c == Some(want)).map(|(s, _)| *s).collect();
        SizeStats::from_sizes(&s)
    };
    Ok(SizeReport { all, correct: pick(true), incorrect: pick(false) })
}

/// Mean per-step set size over trajectory examples.
pub fn step_size_curve(artifact: &Artifact, examples: &[Example]) -> Result<Vec<f64>, HarnessError> {
    let mut acc: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for e in examples {
        if let ConfidenceSet::Trajectory(ts) = artifact.confidence_set(&e.forecast)? {
            let sizes = ts.step_sizes();
            if acc.is_empty() {
                acc = vec![0.0; sizes.len()];
            }
            if sizes.len() != acc.len() {
                return Err(HarnessError::InvalidWorld("trajectories of different horizons".into()));
            }
            acc.iter_mut().zip(&sizes).for_each(|(a, s)| *a += s);
            count += 1;
        }
    }
    if count == 0 {
        return Err(HarnessError::EmptyInput);
    }
    Ok(acc.into_iter().map(|a| a / count as f64).collect())
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub delta: f64,
    pub n: u64,
    /// `ok` or `infeasible`.
    pub status: &'static str,
    pub k_star: Option<u64>,
    pub alpha: Option<f64>,
    #[serde(rename = "T_hat")]
    pub t_hat: Option<f64>,
    pub tau: Option<f64>,
    #[serde(rename = "L_hat")]
    pub l_hat: Option<f64>,
    pub valid: Option<bool>,
    pub true_error: Option<f64>,
    pub size_median: Option<f64>,
    pub size_min: Option<f64>,
    pub size_max: Option<f64>,
    pub size_mean: Option<f64>,
}

/// Fits every `(ε, δ)` pair on one shared calibration, validation, and test
/// draw, so rows differ only through the budget.
pub fn sweep(
    world: &dyn World,
    epsilons: &[f64],
    deltas: &[f64],
    n: usize,
    flags: &PipelineFlags,
    seed: u64,
    test_size: usize,
) -> Result<Vec<SweepRow>, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cal_draw = world.draw(&mut rng, flags.calibration_draws(), "c");
    let val = world.draw(&mut rng, n, "v");
    let test = world.draw(&mut rng, test_size, "t");
    let cal = fit_calibration(&cal_draw, flags.calibration_mode(world)).map_err(HarnessError::from)?;

    let mut rows = Vec::with_capacity(epsilons.len() * deltas.len());
    for &epsilon in epsilons {
        for &delta in deltas {
            let params = PacParams::new(epsilon, delta, n as u64)?;
            let mut row = SweepRow {
                epsilon,
                delta,
                n: n as u64,
                status: "infeasible",
                k_star: None,
                alpha: None,
                t_hat: None,
                tau: cal.tau(),
                l_hat: None,
                valid: None,
                true_error: None,
                size_median: None,
                size_min: None,
                size_max: None,
                size_mean: None,
            };
            let budget = match alpha_for(&params, flags.bound) {
                Ok(b) => b,
                Err(BoundsError::Infeasible { .. }) => {
                    rows.push(row);
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let artifact = fit_artifact(&cal, &budget, &val, &flags.config(world, epsilon, delta))?;
            row.status = "ok";
            row.k_star = Some(artifact.k_star);
            row.alpha = Some(artifact.alpha);
            row.t_hat = Some(artifact.t_hat);
            row.true_error = Some(world.true_error(&cal, artifact.threshold())?.value);
            if !test.is_empty() {
                let ev = empirical_error(&artifact, &test)?;
                let sizes = size_stats(&artifact, &test)?.all;
                row.l_hat = Some(ev.l_hat);
                row.valid = Some(ev.valid);
                row.size_median = Some(sizes.median);
                row.size_min = Some(sizes.min);
                row.size_max = Some(sizes.max);
                row.size_mean = Some(sizes.mean);
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Mass-based sets versus fitted sets on a categorical world.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineReport {
    pub epsilon: f64,
    pub delta: f64,
    pub test_size: u64,
    pub baseline_errors: u64,
    #[serde(rename = "baseline_L_hat")]
    pub baseline_l_hat: f64,
    /// `sqrt(ε(1-ε)/test_size)`.
    pub baseline_se: f64,
    pub baseline_true_error: f64,
    /// `L̂ > ε + 3 SE`.
    pub baseline_invalid: bool,
    pub trials: u64,
    /// Fraction of trials whose fitted sets have true error `<= ε`.
    pub pipeline_valid_fraction: f64,
}

pub fn compare_baseline(
    world: &CategoricalWorld,
    params: &PacParams,
    trials: usize,
    flags: &PipelineFlags,
    test_size: usize,
    seed: u64,
) -> Result<BaselineReport, HarnessError> {
    if test_size == 0 {
        return Err(HarnessError::EmptyInput);
    }
    let epsilon = params.epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let test = world.draw(&mut rng, test_size, "t");
    let baseline_errors = test
        .iter()
        .filter(|e| match (&e.forecast, &e.label) {
            (Forecast::Categorical(c), Label::Class(y)) => !mass_set_categorical(c, epsilon).contains(y),
            _ => unreachable!("categorical world"),
        })
        .count() as u64;
    let baseline_l_hat = baseline_errors as f64 / test_size as f64;
    let baseline_se = (epsilon * (1.0 - epsilon) / test_size as f64).sqrt();

    let pac = verify_pac(world, params, trials, flags, seed)?;
    let ok = pac.records.iter().filter(|r| r.true_error <= epsilon).count();
    Ok(BaselineReport {
        epsilon,
        delta: params.delta,
        test_size: test_size as u64,
        baseline_errors,
        baseline_l_hat,
        baseline_se,
        baseline_true_error: world.baseline_true_error(epsilon),
        baseline_invalid: baseline_l_hat > epsilon + 3.0 * baseline_se,
        trials: pac.trials,
        pipeline_valid_fraction: ok as f64 / pac.trials as f64,
    })
}

/// Writes serializable rows as CSV with a header.
pub fn write_csv<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}
