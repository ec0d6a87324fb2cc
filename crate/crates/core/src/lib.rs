//! PAC confidence sets for black-box probability forecasters.
//!
//! The pipeline recalibrates a forecaster by temperature scaling, turns
//! `(ε, δ, n)` into an admissible number of validation misses, and picks the
//! smallest log-density threshold `T̂` whose sets `{y : log f(y|x) >= -T̂}`
//! respect that budget. With probability at least `1 - δ` over the
//! validation draw, the resulting sets miss at most an `ε` fraction of fresh
//! inputs.

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod bounds;
pub mod cli;
pub mod confset;
pub mod estimator;
pub mod forecaster;
pub mod harness;
pub mod io;
pub mod special;
pub mod trajectory;

pub use bounds::{BoundKind, Budget, PacParams};
pub use confset::{ConfidenceSet, Threshold};
pub use estimator::{Artifact, Example, ScoredExample};
pub use forecaster::{CategoricalForecast, Forecast, GaussianForecast, Label};
pub use trajectory::TrajectoryForecast;
