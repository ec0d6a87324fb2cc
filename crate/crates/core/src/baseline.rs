//! Per-input `(1-ε)`-mass sets. These trust the forecaster's probabilities
//! and carry no coverage guarantee.

use crate::confset::Threshold;
use crate::forecaster::{CategoricalForecast, GaussianForecast};
use crate::special::chi2_quantile;

/// Smallest prefix of the labels ranked by decreasing probability whose
/// total mass reaches `1 - ε`. Equal probabilities rank by label index.
/// Returned ascending.
pub fn mass_set_categorical(f: &CategoricalForecast, epsilon: f64) -> Vec<usize> {
    let lp = f.log_probs();
    let mut ranked: Vec<usize> = (0..lp.len()).filter(|i| lp[*i] > f64::NEG_INFINITY).collect();
    ranked.sort_by(|a, b| lp[*b].total_cmp(&lp[*a]).then(a.cmp(b)));
    let target = 1.0 - epsilon;
    let mut mass = 0.0;
    let mut take = ranked.len();
    for (i, label) in ranked.iter().enumerate() {
        mass += lp[*label].exp();
        if mass >= target {
            take = i + 1;
            break;
        }
    }
    let mut set = ranked[..take].to_vec();
    set.sort_unstable();
    set
}

/// Squared Mahalanobis radius enclosing `1 - ε` of a `d`-dimensional
/// Gaussian: the chi-square quantile.
pub fn mass_radius_sq(dim: usize, epsilon: f64) -> f64 {
    chi2_quantile(dim, 1.0 - epsilon)
}

/// Input-specific threshold `T̂(x) = r²/2 + (d ln 2π + ln det Σ)/2` whose
/// ellipsoid holds `1 - ε` of the forecast's own mass.
pub fn mass_set_gaussian(f: &GaussianForecast, epsilon: f64) -> Threshold {
    let r2 = mass_radius_sq(f.dim(), epsilon);
    Threshold(0.5 * r2 + 0.5 * f.log_norm_const())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confset::radius_sq;
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cat(p: &[f64]) -> CategoricalForecast {
        CategoricalForecast::from_probs(p).unwrap()
    }

    #[test]
    fn categorical_examples() {
        let f = cat(&[0.5, 0.3, 0.2]);
        assert_eq!(mass_set_categorical(&f, 0.25), vec![0, 1]);
        assert_eq!(mass_set_categorical(&f, 0.1), vec![0, 1, 2]);
        assert_eq!(mass_set_categorical(&cat(&[0.0, 1.0, 0.0]), 0.01), vec![1]);
        assert_eq!(mass_set_categorical(&cat(&[0.25, 0.5, 0.25]), 0.3), vec![0, 1]);
    }

    #[test]
    fn categorical_prefix_is_minimal() {
        let f = cat(&[0.05, 0.4, 0.15, 0.3, 0.1]);
        for &eps in &[0.01, 0.1, 0.2, 0.35, 0.5] {
            let set = mass_set_categorical(&f, eps);
            let mass: f64 = set.iter().map(|i| f.probs()[*i]).sum();
            assert!(mass >= 1.0 - eps - 1e-12);
            let weakest = *set.iter().min_by(|a, b| f.probs()[**a].total_cmp(&f.probs()[**b])).unwrap();
            assert!(mass - f.probs()[weakest] < 1.0 - eps);
        }
    }

    #[test]
    fn gaussian_radius_examples() {
        let g = GaussianForecast::univariate(0.0, 1.0).unwrap();
        let t = mass_set_gaussian(&g, 0.317_310_507_862_914_1);
        assert!((radius_sq(&g, t).sqrt() - 1.0).abs() < 1e-8);

        let g2 = GaussianForecast::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let t = mass_set_gaussian(&g2, (-1.0f64).exp());
        assert!((radius_sq(&g2, t) - 2.0).abs() < 1e-9);

        assert!(mass_radius_sq(3, 1.0 - 1e-12) < 1e-6);
    }

    #[test]
    fn gaussian_mass_coverage_mc() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = 0.1;
        for d in [1usize, 2, 5] {
            let a = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.3 / (1 + i + j) as f64 });
            let cov = &a * a.transpose();
            let g = GaussianForecast::new(DVector::from_element(d, 1.0), cov).unwrap();
            let t = mass_set_gaussian(&g, eps);
            let l = g.chol_factor();
            let samples = 200_000;
            let mut inside = 0usize;
            for _ in 0..samples {
                let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
                let y = g.mean() + &l * z;
                if g.log_density(&y).unwrap() >= -t.0 {
                    inside += 1;
                }
            }
            let p = inside as f64 / samples as f64;
            let se = ((1.0 - eps) * eps / samples as f64).sqrt();
            assert!((p - (1.0 - eps)).abs() < 3.0 * se, "d={d}: {p}");
        }
    }
}
