//! Validation-error budgets for the threshold estimator.
//!
//! Two routes produce the admissible number of validation misses `k*`:
//! the direct binomial-tail bound and the (looser) VC uniform-convergence
//! bound. Everything runs in natural-log space so that `n` in the tens of
//! thousands does not underflow.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Target miscoverage, failure probability and validation-set size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacParams {
    pub epsilon: f64,
    pub delta: f64,
    pub n: u64,
}

impl PacParams {
    pub fn new(epsilon: f64, delta: f64, n: u64) -> Result<Self, BoundsError> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(BoundsError::Domain(format!("epsilon must lie in (0,1), got {epsilon}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(BoundsError::Domain(format!("delta must lie in (0,1), got {delta}")));
        }
        if n == 0 {
            return Err(BoundsError::Domain("n must be positive".into()));
        }
        Ok(Self { epsilon, delta, n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Direct,
    Vc,
}

impl std::fmt::Display for BoundKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BoundKind::Direct => write!(f, "direct"),
            BoundKind::Vc => write!(f, "vc"),
        }
    }
}

impl std::str::FromStr for BoundKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(BoundKind::Direct),
            "vc" => Ok(BoundKind::Vc),
            other => Err(format!("unknown bound kind `{other}` (expected direct|vc)")),
        }
    }
}

/// Admissible number of validation misses. `alpha` is always `k_star / n`;
/// the integer is the source of truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub k_star: u64,
    pub n: u64,
    pub bound_kind: BoundKind,
}

impl Budget {
    pub fn alpha(&self) -> f64 {
        self.k_star as f64 / self.n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundsError {
    #[error("argument out of range: {0}")]
    Domain(String),

    /// No threshold can be certified. `min_n` is the smallest validation size
    /// at which `k* = 0` becomes feasible for the same bound.
    #[error("{bound} bound infeasible at n={n}, epsilon={epsilon}, delta={delta}; need n >= {min_n}")]
    Infeasible {
        bound: BoundKind,
        n: u64,
        epsilon: f64,
        delta: f64,
        min_n: u64,
    },

    #[error("sample-size search overflowed u64 range")]
    Overflow,
}

/// `ln(e^a + e^b)` without overflow; `-inf` is the identity.
pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Iterator over `ln[C(n,i) eps^i (1-eps)^(n-i)]` for `i = 0, 1, ..., n`,
/// updated incrementally.
struct LogBinomialTerms {
    n: u64,
    i: u64,
    term: f64,
    log_odds: f64,
}

impl LogBinomialTerms {
    fn new(n: u64, epsilon: f64) -> Self {
        Self {
            n,
            i: 0,
            term: n as f64 * (-epsilon).ln_1p(),
            log_odds: epsilon.ln() - (-epsilon).ln_1p(),
        }
    }
}

impl Iterator for LogBinomialTerms {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        if self.i > self.n {
            return None;
        }
        let out = self.term;
        // C(n,i+1)/C(n,i) = (n-i)/(i+1)
        if self.i < self.n {
            self.term += ((self.n - self.i) as f64).ln() - ((self.i + 1) as f64).ln() + self.log_odds;
        }
        self.i += 1;
        Some(out)
    }
}

/// `ln P[Bin(n, eps) <= k]`.
pub fn log_binomial_tail(n: u64, epsilon: f64, k: u64) -> Result<f64, BoundsError> {
    check_tail_args(n, epsilon, k)?;
    if k == n {
        return Ok(0.0);
    }
    if epsilon == 1.0 {
        // all mass at i = n
        return Ok(f64::NEG_INFINITY);
    }
    Ok(LogBinomialTerms::new(n, epsilon)
        .take(k as usize + 1)
        .fold(f64::NEG_INFINITY, log_add_exp))
}

/// Lower binomial CDF `sum_{i<=k} C(n,i) eps^i (1-eps)^(n-i)`.
pub fn binomial_tail(n: u64, epsilon: f64, k: u64) -> Result<f64, BoundsError> {
    log_binomial_tail(n, epsilon, k).map(f64::exp)
}

fn check_tail_args(n: u64, epsilon: f64, k: u64) -> Result<(), BoundsError> {
    if n == 0 {
        return Err(BoundsError::Domain("n must be positive".into()));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(BoundsError::Domain(format!("epsilon must lie in (0,1], got {epsilon}")));
    }
    if k > n {
        return Err(BoundsError::Domain(format!("k={k} exceeds n={n}")));
    }
    Ok(())
}

/// Largest `k` whose binomial tail stays strictly below `delta`.
///
/// Enumerates `k` upward, accumulating the tail in log space, and stops at
/// the first `k` that violates the constraint.
pub fn direct_alpha(p: &PacParams) -> Result<Budget, BoundsError> {
    let log_delta = p.delta.ln();
    let mut acc = f64::NEG_INFINITY;
    let mut k_star = None;
    // k = n has tail exactly 1 >= delta, so only k < n is enumerated.
    for (k, term) in LogBinomialTerms::new(p.n, p.epsilon).take(p.n as usize).enumerate() {
        acc = log_add_exp(acc, term);
        if acc < log_delta {
            k_star = Some(k as u64);
        } else {
            break;
        }
    }
    match k_star {
        Some(k_star) => Ok(Budget { k_star, n: p.n, bound_kind: BoundKind::Direct }),
        None => Err(BoundsError::Infeasible {
            bound: BoundKind::Direct,
            n: p.n,
            epsilon: p.epsilon,
            delta: p.delta,
            min_n: min_n_direct(p.epsilon, p.delta)?,
        }),
    }
}

/// `sqrt((ln(2n) + 1 - ln(delta/4)) / n)`.
pub fn vc_radical(n: u64, delta: f64) -> f64 {
    let n = n as f64;
    (((2.0 * n).ln() + 1.0 - (delta / 4.0).ln()) / n).sqrt()
}

/// Budget from the VC bound: `alpha = eps - radical`, `k* = floor(n alpha)`.
pub fn vc_alpha(p: &PacParams) -> Result<Budget, BoundsError> {
    let alpha = p.epsilon - vc_radical(p.n, p.delta);
    if alpha < 0.0 {
        return Err(BoundsError::Infeasible {
            bound: BoundKind::Vc,
            n: p.n,
            epsilon: p.epsilon,
            delta: p.delta,
            min_n: min_n_vc(p.epsilon, p.delta)?,
        });
    }
    let k_star = ((p.n as f64 * alpha).floor() as u64).min(p.n);
    Ok(Budget { k_star, n: p.n, bound_kind: BoundKind::Vc })
}

pub fn alpha_for(p: &PacParams, kind: BoundKind) -> Result<Budget, BoundsError> {
    match kind {
        BoundKind::Direct => direct_alpha(p),
        BoundKind::Vc => vc_alpha(p),
    }
}

fn check_eps_delta(epsilon: f64, delta: f64) -> Result<(), BoundsError> {
    PacParams::new(epsilon, delta, 1).map(|_| ())
}

/// Smallest `n` with `(1-eps)^n < delta`, i.e. the smallest validation set
/// for which the direct bound admits `k* = 0`.
pub fn min_n_direct(epsilon: f64, delta: f64) -> Result<u64, BoundsError> {
    check_eps_delta(epsilon, delta)?;
    let log_q = (-epsilon).ln_1p();
    let log_delta = delta.ln();
    let holds = |n: u64| (n as f64) * log_q < log_delta;
    let guess = (log_delta / log_q).ceil();
    if !guess.is_finite() || guess >= u64::MAX as f64 {
        return Err(BoundsError::Overflow);
    }
    let mut n = (guess as u64).max(1);
    while !holds(n) {
        n = n.checked_add(1).ok_or(BoundsError::Overflow)?;
    }
    while n > 1 && holds(n - 1) {
        n -= 1;
    }
    Ok(n)
}

/// Smallest `n` with `eps >= sqrt((ln(2n) + 1 + ln(4/delta)) / n)`.
///
/// The predicate is false for every `n <= 1/eps^2` and monotone above, so a
/// doubling bracket followed by bisection finds the exact boundary.
pub fn min_n_vc(epsilon: f64, delta: f64) -> Result<u64, BoundsError> {
    check_eps_delta(epsilon, delta)?;
    let holds = |n: u64| epsilon >= vc_radical(n, delta);
    const LIMIT: u64 = i64::MAX as u64;

    let mut hi: u64 = 1;
    while !holds(hi) {
        if hi > LIMIT / 2 {
            return Err(BoundsError::Overflow);
        }
        hi *= 2;
    }
    if hi == 1 {
        return Ok(1);
    }
    let mut lo = hi / 2; // predicate false here
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    debug_assert!(holds(hi) && !holds(hi - 1));
    if !holds(hi) || holds(hi - 1) {
        return Err(BoundsError::Domain(format!(
            "VC sample-size predicate not monotone near n={hi}"
        )));
    }
    Ok(hi)
}
