//! Estimators of prediction-model performance in a target population.
//!
//! Given individual-level data from one or more source studies (covariates
//! and outcomes) and a covariates-only sample from a target population, this
//! crate estimates how a fixed prediction model or marker would perform in
//! that target population: sensitivity, specificity, positive and negative
//! predictive value, loss-based risk, and AUC. Three transport estimators are
//! provided for each measure, alongside the naive pooled-source baseline:
//!
//! * outcome-model (`om`): averages a fitted outcome regression over the
//!   target sample,
//! * weighting (`w`): reweights study observations by estimated
//!   participation odds,
//! * doubly robust (`dr`): combines both and stays consistent when either
//!   nuisance model is correct.
//!
//! On top of the point estimators sit an exponential-tilt sensitivity
//! analysis for violations of conditional exchangeability, survey-weight
//! variants of every estimator, stratified bootstrap inference, and a
//! simulation engine used by the acceptance suite.
//!
//! Everything numeric is generic over the scalar type via [`scalar::Scalar`];
//! the aliases below fix `f64`, which is what the CLI and the test suite use.

pub mod auc;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod kahan;
pub mod metrics;
pub mod nuisance;
pub mod run;
pub mod scalar;
pub mod simulation;
pub mod tilt;

pub use error::{Error, Result};
pub use scalar::{RandScalar, Scalar};

/// Default-precision aliases.
pub type Dataset = dataset::AnalysisDataset<f64>;
pub type Row = dataset::DataRow<f64>;
pub type Fit = nuisance::NuisanceFit<f64>;
pub type Estimate = metrics::PerformanceEstimate<f64>;
pub type AucEstimate = auc::AucEstimate<f64>;
pub type Interval = inference::IntervalEstimate<f64>;
pub type SimConfig = simulation::SimulationConfig<f64>;
