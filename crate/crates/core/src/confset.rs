//! Confidence sets `C_T(x) = { y : log f(y|x) >= -T }`.
//!
//! Membership is an exact `>=` on the computed log-density; boundary points
//! are members. For Gaussians the set is the ellipsoid
//! `(y-μ)^T Σ^{-1} (y-μ) <= r²` with `r² = 2T - d ln 2π - ln det Σ`, empty
//! when `r² <= 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecaster::{log_prob, CategoricalForecast, Forecast, ForecastError, GaussianForecast, Label};
use crate::trajectory::{self, TrajectorySet};

/// Log-density cutoff; larger values give larger sets.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Threshold(pub f64);

impl Threshold {
    /// The density level `e^{-T}` as a log: members satisfy `log f >= -T`.
    pub fn log_level(self) -> f64 {
        -self.0
    }
}

pub const MAX_CONDITION_NUMBER: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfsetError {
    #[error(transparent)]
    Forecast(#[from] ForecastError),

    #[error("covariance condition number {0:e} exceeds 1e12")]
    NumericallySingular(f64),

    #[error("interval sets need a 1-dimensional Gaussian, got dimension {0}")]
    NotUnivariate(usize),
}

/// Labels with `log f(y|x) >= -T`, ascending.
pub fn categorical_set(f: &CategoricalForecast, t: Threshold) -> Vec<usize> {
    let level = t.log_level();
    f.log_probs()
        .iter()
        .enumerate()
        .filter(|(_, lp)| **lp >= level)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn size(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }
}

/// `2T - d ln 2π - ln det Σ`.
pub fn radius_sq(g: &GaussianForecast, t: Threshold) -> f64 {
    2.0 * t.0 - g.log_norm_const()
}

/// `[μ - σ r, μ + σ r]`, or `None` when the mode density is below `e^{-T}`.
pub fn interval_set(g: &GaussianForecast, t: Threshold) -> Result<Option<Interval>, ConfsetError> {
    if g.dim() != 1 {
        return Err(ConfsetError::NotUnivariate(g.dim()));
    }
    let r2 = radius_sq(g, t);
    if r2 < 0.0 {
        return Ok(None);
    }
    let mu = g.mean()[0];
    let half = g.cov()[(0, 0)].sqrt() * r2.sqrt();
    Ok(Some(Interval { lo: mu - half, hi: mu + half }))
}

/// `center + axes · S^{d-1}`. The columns of `axes` are the principal
/// semi-axes, longest first.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidSet {
    pub center: DVector<f64>,
    pub axes: DMatrix<f64>,
    pub radius_sq: f64,
    /// Frobenius norm of `axes`; 0 for an empty set.
    pub size: f64,
}

impl EllipsoidSet {
    pub fn is_empty(&self) -> bool {
        self.radius_sq <= 0.0
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Axis-aligned bounding box `(lower, upper)`: half-widths are the row
    /// norms of `axes`.
    pub fn bounding_box(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        if self.is_empty() {
            return None;
        }
        let half = DVector::from_fn(self.dim(), |i, _| self.axes.row(i).norm());
        Some((&self.center - &half, &self.center + &half))
    }
}

/// Ellipsoid `{ y : (y-c)^T cov^{-1} (y-c) <= r² }`.
///
/// With `cov = Q diag(λ) Q^T`, the semi-axes are `sqrt(r² λ_i) q_i`, so
/// `axes = Q diag(sqrt(r² λ))` and `‖axes‖_F = sqrt(r² tr cov)`. Each
/// eigenvector is signed so its largest-magnitude entry is positive.
pub fn ellipsoid_with_radius(
    center: &DVector<f64>,
    cov: &DMatrix<f64>,
    radius_sq: f64,
) -> Result<EllipsoidSet, ConfsetError> {
    let d = center.len();
    let eig = cov.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION_NUMBER) {
        return Err(ConfsetError::NumericallySingular(cond));
    }
    if radius_sq <= 0.0 {
        return Ok(EllipsoidSet {
            center: center.clone(),
            axes: DMatrix::zeros(d, d),
            radius_sq,
            size: 0.0,
        });
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let mut axes = DMatrix::zeros(d, d);
    for (col, &k) in order.iter().enumerate() {
        let mut q = eig.eigenvectors.column(k).into_owned();
        let pivot = q.iamax();
        if q[pivot] < 0.0 {
            q = -q;
        }
        axes.set_column(col, &(q * (radius_sq * eig.eigenvalues[k]).sqrt()));
    }
    let size = axes.norm();
    Ok(EllipsoidSet { center: center.clone(), axes, radius_sq, size })
}

pub fn ellipsoid_set(g: &GaussianForecast, t: Threshold) -> Result<EllipsoidSet, ConfsetError> {
    ellipsoid_with_radius(g.mean(), g.cov(), radius_sq(g, t))
}

/// `log f(y|x) >= -T`.
pub fn member(f: &Forecast, t: Threshold, y: &Label) -> Result<bool, ForecastError> {
    Ok(log_prob(f, y)? >= t.log_level())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfidenceSet {
    Labels(Vec<usize>),
    Interval(Option<Interval>),
    Ellipsoid(EllipsoidSet),
    Trajectory(TrajectorySet),
}

impl ConfidenceSet {
    /// Label count, interval length, `‖Λ‖_F`, or mean per-step `‖Λ_t‖_F`.
    pub fn size(&self) -> f64 {
        match self {
            ConfidenceSet::Labels(labels) => labels.len() as f64,
            ConfidenceSet::Interval(iv) => iv.map_or(0.0, |iv| iv.size()),
            ConfidenceSet::Ellipsoid(e) => e.size,
            ConfidenceSet::Trajectory(t) => t.mean_size(),
        }
    }
}

/// Materializes `C_T(x)`; 1-D Gaussians become intervals.
pub fn confidence_set(f: &Forecast, t: Threshold) -> Result<ConfidenceSet, ConfsetError> {
    Ok(match f {
        Forecast::Categorical(c) => ConfidenceSet::Labels(categorical_set(c, t)),
        Forecast::Gaussian(g) if g.dim() == 1 => ConfidenceSet::Interval(interval_set(g, t)?),
        Forecast::Gaussian(g) => ConfidenceSet::Ellipsoid(ellipsoid_set(g, t)?),
        Forecast::Trajectory(tf) => ConfidenceSet::Trajectory(trajectory::per_step_sets(tf, t)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::LN_2PI;
    use proptest::prelude::*;

    fn std_normal() -> GaussianForecast {
        GaussianForecast::univariate(0.0, 1.0).unwrap()
    }

    #[test]
    fn categorical_examples() {
        let f = CategoricalForecast::from_probs(&[0.5, 0.3, 0.2]).unwrap();
        assert_eq!(categorical_set(&f, Threshold(-(0.25f64.ln()))), vec![0, 1]);
        let z = CategoricalForecast::from_probs(&[0.6, 0.0, 0.4]).unwrap();
        assert_eq!(categorical_set(&z, Threshold(1e9)), vec![0, 2]);
        assert!(categorical_set(&f, Threshold(0.1)).is_empty());
    }

    #[test]
    fn interval_examples() {
        let half_ln_2pi = 0.5 * LN_2PI;
        let iv = interval_set(&std_normal(), Threshold(half_ln_2pi)).unwrap().unwrap();
        assert_eq!((iv.lo, iv.hi, iv.size()), (0.0, 0.0, 0.0));

        let iv = interval_set(&std_normal(), Threshold(half_ln_2pi + 2.0)).unwrap().unwrap();
        assert!((iv.lo + 2.0).abs() < 1e-14 && (iv.hi - 2.0).abs() < 1e-14);
        assert!((iv.size() - 4.0).abs() < 1e-14);

        let g = GaussianForecast::univariate(5.0, 2.0).unwrap();
        let below = (2.0 * (2.0 * std::f64::consts::PI).sqrt()).ln() - 0.1;
        assert_eq!(interval_set(&g, Threshold(below)).unwrap(), None);

        let g2 = GaussianForecast::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert_eq!(interval_set(&g2, Threshold(1.0)), Err(ConfsetError::NotUnivariate(2)));
    }

    #[test]
    fn ellipsoid_examples() {
        let g = GaussianForecast::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let e = ellipsoid_set(&g, Threshold(LN_2PI + 0.5)).unwrap();
        assert!((e.radius_sq - 1.0).abs() < 1e-14);
        assert!((e.size - 2f64.sqrt()).abs() < 1e-14);
        let gram = e.axes.transpose() * &e.axes;
        assert!((gram - DMatrix::identity(2, 2)).amax() < 1e-12);

        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let e = ellipsoid_with_radius(&DVector::zeros(2), &cov, 1.0).unwrap();
        assert!((e.size - 5f64.sqrt()).abs() < 1e-14);
        assert!(e.axes[(0, 0)] > 0.0);
    }

    #[test]
    fn empty_ellipsoid_has_zero_size() {
        let g = GaussianForecast::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        let e = ellipsoid_set(&g, Threshold(0.0)).unwrap();
        assert!(e.is_empty());
        assert_eq!(e.size, 0.0);
        assert_eq!(e.bounding_box(), None);
    }

    #[test]
    fn ill_conditioned_covariance_rejected() {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-13]));
        let g = GaussianForecast::new(DVector::zeros(2), cov).unwrap();
        assert!(matches!(ellipsoid_set(&g, Threshold(10.0)), Err(ConfsetError::NumericallySingular(_))));
    }

    #[test]
    fn member_examples() {
        let f = Forecast::Gaussian(std_normal());
        let t = Threshold(0.5 * LN_2PI);
        assert!(member(&f, t, &Label::Vector(DVector::from_element(1, 0.0))).unwrap());
        assert!(!member(&f, t, &Label::Vector(DVector::from_element(1, 3.0))).unwrap());
        let c = Forecast::Categorical(CategoricalForecast::from_probs(&[0.5, 0.3, 0.2]).unwrap());
        assert!(!member(&c, Threshold(-(0.25f64.ln())), &Label::Class(2)).unwrap());
        assert!(member(&f, t, &Label::Vector(DVector::zeros(2))).is_err());
    }

    #[test]
    fn bounding_box_contains_axis_endpoints() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.8, 0.8, 1.0]);
        let e = ellipsoid_with_radius(&DVector::from_vec(vec![1.0, -1.0]), &cov, 3.0).unwrap();
        let (lo, hi) = e.bounding_box().unwrap();
        for i in 0..2 {
            let half = (3.0 * cov[(i, i)]).sqrt();
            assert!((hi[i] - lo[i] - 2.0 * half).abs() < 1e-12);
        }
    }

    fn spd(d: usize, seed: &[f64]) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |i, j| seed[(i * d + j) % seed.len()]);
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    }

    proptest! {
        #[test]
        fn sets_are_nested(
            probs in prop::collection::vec(0.01f64..1.0, 2..8),
            t1 in -1.0f64..8.0,
            dt in 0.0f64..5.0,
        ) {
            let total: f64 = probs.iter().sum();
            let f = CategoricalForecast::from_probs(&probs.iter().map(|p| p / total).collect::<Vec<_>>()).unwrap();
            let small = categorical_set(&f, Threshold(t1));
            let large = categorical_set(&f, Threshold(t1 + dt));
            prop_assert!(small.iter().all(|y| large.contains(y)));
        }

        #[test]
        fn gaussian_nesting_and_boundary_points(
            d in 1usize..5,
            seed in prop::collection::vec(-1.0f64..1.0, 25),
            t in -2.0f64..10.0,
            dt in 0.0f64..3.0,
            y in prop::collection::vec(-3.0f64..3.0, 5),
        ) {
            let g = GaussianForecast::new(DVector::from_row_slice(&y[..d]) * 0.5, spd(d, &seed)).unwrap();
            let f = Forecast::Gaussian(g.clone());
            let label = Label::Vector(DVector::from_row_slice(&y[..d]));
            if member(&f, Threshold(t), &label).unwrap() {
                prop_assert!(member(&f, Threshold(t + dt), &label).unwrap());
            }
            let e = ellipsoid_set(&g, Threshold(t)).unwrap();
            if !e.is_empty() {
                let u = DVector::from_fn(d, |i, _| seed[i] + 0.01);
                let p = &e.center + &e.axes * u.normalize();
                let ld = g.log_density(&p).unwrap();
                prop_assert!((ld + t).abs() < 1e-8, "{} vs {}", ld, -t);
                let closed = (e.radius_sq * g.cov().trace()).sqrt();
                prop_assert!((e.size - closed).abs() < 1e-8 * closed.max(1.0));
            }
        }
    }
}
