//! Ensemble Kalman inversion (EnKI) and its dual view.
//!
//! The crate covers the single-step EnKF as a randomized dual problem,
//! finite-sample error bounds for that step, iterative EnKI with pluggable
//! step-size (inflation) policies including the adaptive multiplicative
//! correction of [`mc`], and three benchmark inverse problems.

pub mod baselines;
pub mod bound;
pub mod dual;
pub mod enki;
pub mod ensemble;
pub mod error;
pub mod linalg;
pub mod mc;
pub mod problems;

pub use ensemble::{
    ensemble_forward_stats, evaluate_ensemble, sample_covariance, sample_mean, Ensemble, ForwardOperator,
    ForwardStats, GaussianMeasure, LinearOperator, NoiseModel, Observation,
};
pub use error::{EnkiError, ForwardError, Result};
