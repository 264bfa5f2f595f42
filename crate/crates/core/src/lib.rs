//! Assessment of heterogeneous treatment effect (HTE) estimators through
//! matched pseudo-observations.
//!
//! Treated and control units are paired by an optimal match on a distance
//! learned from the control group alone, the response differences of the
//! matched pairs stand in for the unobservable effect, and the usual
//! prediction-error machinery (hold-out or cross-validation) is applied to
//! them.
//!
//! Module map:
//!
//! - [`data`]: datasets, matches and CSV ingestion.
//! - [`synth`]: synthetic scenarios with known truth.
//! - [`forest`]: control-only regression forest used as a metric learner.
//! - [`distance`]: proximity, Mahalanobis and semi-oracle distance matrices.
//! - [`flow`]: total and average distance matching via minimum-cost flow.
//! - [`brute`]: exhaustive matching oracle for small instances.
//! - [`prune`]: reduction of a match to star-shaped components.
//! - [`assess`]: validation error, bounds, fold construction, cross-validation
//!   and conditional likelihood criteria.
//! - [`lasso`]: the joint LASSO estimator under test.
//! - [`harness`]: the simulation study driver and its outputs.

pub mod assess;
pub mod brute;
pub mod data;
pub mod distance;
pub mod error;
pub mod flow;
pub mod forest;
pub mod harness;
pub mod lasso;
pub mod prune;
pub mod rng;
pub mod synth;

pub use data::{Dataset, Match, MatchSpec, Matrix, Pair, Truth};
pub use error::{Error, Result};
