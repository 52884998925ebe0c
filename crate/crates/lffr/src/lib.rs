//! Longitudinal function-on-function regression.
//!
//! The pipeline fits a functional outcome on scalar and functional predictors
//! observed over repeated visits in three steps: (1) independent penalized
//! mixed-model fits at every outcome location, (2) univariate and bivariate
//! smoothing of the pointwise estimates, and (3) confidence bands from an
//! analytic covariance of the estimates, a cluster bootstrap of subjects, or
//! correlation-and-multiplicity-adjusted critical values. A simulation
//! harness generates synthetic longitudinal functional data and replicates
//! coverage and accuracy studies.

pub mod basis;
pub mod covariance;
pub mod data;
pub mod error;
pub mod fpca;
pub mod inference;
pub mod optim;
pub mod pipeline;
pub mod pointwise;
pub mod quad;
pub mod simulation;
pub mod smoothing;

pub use error::{Error, Result};
